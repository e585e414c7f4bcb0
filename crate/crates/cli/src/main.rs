//! `tide`: generate the benchmark, annotate it, train, evaluate and correct.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tide_core::config::{Ablation, RunConfig};
use tide_core::eval::concept_silhouette;
use tide_core::pipeline::{self, ModelRun};
use tide_core::synthbench::{Dataset, Sample, Split};
use tide_core::TideError;

#[derive(Debug, Parser)]
#[command(name = "tide", version, about = "Concept-grounded single-source domain generalization")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the benchmark and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct ModelArgs {
    /// Loss terms to switch off (k, csa, lcc); repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Ablation>,
}

impl ModelArgs {
    fn set(&self) -> BTreeSet<Ablation> {
        self.ablate.iter().copied().collect()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic benchmark.
    Generate,
    /// Transfer exemplar concept masks onto the benchmark.
    Annotate,
    /// Train the class-only model per source domain and select important concepts.
    Discover {
        #[arg(long)]
        fresh: bool,
    },
    /// Train one model per source domain and build its concept signatures.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Discard existing checkpoints instead of resuming them.
        #[arg(long)]
        fresh: bool,
    },
    /// Accuracy and saliency overlap on the target domains.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        /// Also run test-time correction.
        #[arg(long)]
        correct: bool,
    },
    /// Run test-time correction on the target domains and write traces.
    Correct {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write saliency overlays for the given samples.
    Overlay {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, required = true, value_delimiter = ',')]
        samples: Vec<String>,
    },
    /// Export mask-pooled concept features as CSV.
    ExportFeatures {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Summarize every evaluation report of the run.
    Report,
}

fn runs(cfg: &RunConfig, ds: &Dataset, model: &ModelArgs) -> Result<Vec<ModelRun>, TideError> {
    pipeline::sources(cfg, ds)?
        .iter()
        .map(|s| pipeline::load_run(cfg, s, &model.set()))
        .collect()
}

fn execute(cli: Cli) -> Result<(), TideError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed, cli.out.clone())?;
    cfg.write_resolved()?;
    match cli.command {
        Command::Generate => {
            let ds = pipeline::generate(&cfg)?;
            println!("{} samples written to {}", ds.records().len(), ds.root().display());
        }
        Command::Annotate => {
            let (ds, report) = pipeline::annotate(&cfg)?;
            println!(
                "{} samples annotated ({} masks, {} cached), {} failed; dataset at {}",
                report.annotated,
                report.masks_written,
                report.cache_hits,
                report.failures.len(),
                ds.root().display()
            );
            for f in &report.failures {
                println!("  {}: {}", f.sample_id, f.message);
            }
        }
        Command::Discover { fresh } => {
            let ds = pipeline::open_dataset(&cfg)?;
            for source in pipeline::sources(&cfg, &ds)? {
                let table = pipeline::discover(&cfg, &ds, &source, !fresh)?;
                for c in &table.classes {
                    let names: Vec<String> = c.important.iter().map(|k| ds.index().concepts[k.0].name.clone()).collect();
                    println!("{source} {}: {}", ds.index().classes[c.class_id.0].name, names.join(", "));
                }
            }
        }
        Command::Train { model, fresh } => {
            let ds = pipeline::open_dataset(&cfg)?;
            for source in pipeline::sources(&cfg, &ds)? {
                let run = pipeline::train_source(&cfg, &ds, &source, &model.set(), !fresh)?;
                println!("{source} {}: step {} -> {}", run.label, run.checkpoint.state.step, run.dir.display());
            }
        }
        Command::Evaluate { model, correct } => {
            let ds = pipeline::open_dataset(&cfg)?;
            for run in runs(&cfg, &ds, &model)? {
                let r = pipeline::evaluate(&cfg, &ds, &run, correct)?;
                println!("{}", serde_json::to_string_pretty(&r).map_err(TideError::from)?);
            }
        }
        Command::Correct { model } => {
            let ds = pipeline::open_dataset(&cfg)?;
            for run in runs(&cfg, &ds, &model)? {
                let r = pipeline::correct(&cfg, &ds, &run)?;
                println!("{}", serde_json::to_string_pretty(&r).map_err(TideError::from)?);
            }
        }
        Command::Overlay { model, samples } => {
            let ds = pipeline::open_dataset(&cfg)?;
            for run in runs(&cfg, &ds, &model)? {
                let dir = run.dir.join("overlays");
                let s = pipeline::overlay(&ds, &run, &samples, &dir)?;
                println!("{} overlays in {}", s.written.len(), dir.display());
                for id in &s.unknown {
                    println!("  unknown sample {id}");
                }
            }
        }
        Command::ExportFeatures { model, split } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(TideError::InvalidConfig(format!("unknown split `{other}`"))),
            };
            let ds = pipeline::open_dataset(&cfg)?;
            for run in runs(&cfg, &ds, &model)? {
                let samples: Vec<Sample> = ds.load_all(None, Some(split))?;
                let path = run.dir.join(pipeline::FEATURES_FILE);
                let rows = pipeline::export_features(&run, &samples, &path)?;
                println!("{} rows written to {}; concept silhouette {:.4}", rows.len(), path.display(), concept_silhouette(&rows)?);
            }
        }
        Command::Report => print!("{}", pipeline::report(&cfg)?),
    }
    info!("done");
    Ok(())
}

fn exit_code(e: &TideError) -> u8 {
    match e {
        TideError::InvalidConfig(_) | TideError::Serde(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
