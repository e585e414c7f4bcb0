//! Stage functions behind the command-line verbs. Every stage reads a resolved
//! [`RunConfig`] and writes under its output directory:
//!
//! ```text
//! <out>/resolved_config.toml
//! <out>/data/                          generated benchmark
//! <out>/annotated/                     benchmark with transferred masks
//! <out>/<source>/discovery/            class-only model and important_concepts.json
//! <out>/<source>/<objective>/          checkpoint, log, signatures, reports, traces
//! <out>/report.md
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::annotation::{
    annotate_corpus, benchmark_exemplars, build_prompt, AnnotationReport, ConceptProvider, MockProvider,
    TransferCache,
};
use crate::config::{apply_ablations, objective_label, objective_slug, Ablation, MaskSource, ProviderKind, RunConfig};
use crate::correction::{build_signatures, correct_samples, correction_report, CorrectionReport, CorrectionTrace, SignatureStore};
use crate::error::{Result, TideError};
use crate::eval::{accuracy, concept_overlaps, export_concept_features, mean_overlap, DomainResult, EvalReport, FeatureRow};
use crate::io::{encode_png_rgb, write_atomic};
use crate::nn::TideModel;
use crate::primitives::{ClassId, SaliencyMap, SaliencyTarget};
use crate::saliency::{discover_concepts, gradcam_inspected, ConceptModel, ImportantConceptTable};
use crate::synthbench::{generate_dataset, Dataset, Sample, Split};
use crate::training::{train, Checkpoint, LossWeights, TrainConfig, TrainOptions, CHECKPOINT_FILE};

pub const DATA_DIR: &str = "data";
pub const ANNOTATED_DIR: &str = "annotated";
pub const DISCOVERY_DIR: &str = "discovery";
pub const TABLE_FILE: &str = "important_concepts.json";
pub const SIGNATURES_FILE: &str = "signatures.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const CORRECTION_REPORT_FILE: &str = "correction_report.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const EXEMPLARS_FILE: &str = "exemplars.json";
pub const REPORT_FILE: &str = "report.md";

/// Upsampling factor of overlay images.
pub const OVERLAY_SCALE: usize = 8;

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.dataset.path.clone().unwrap_or_else(|| cfg.out.join(DATA_DIR))
}

pub fn model_dir(cfg: &RunConfig, source: &str, weights: &LossWeights) -> PathBuf {
    cfg.out.join(source).join(objective_slug(weights))
}

/// The dataset that discovery, training and evaluation read.
pub fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = match cfg.dataset.masks {
        MaskSource::Generated => data_dir(cfg),
        MaskSource::Annotated => cfg.out.join(ANNOTATED_DIR),
    };
    Dataset::open(&dir)
}

pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.dataset.path.is_some() {
        return Err(TideError::InvalidConfig(
            "dataset.path points at an existing dataset; nothing to generate".into(),
        ));
    }
    let ds = generate_dataset(&cfg.benchmark, &data_dir(cfg))?;
    info!("generated {} samples in {}", ds.records().len(), ds.root().display());
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub class: String,
    pub concepts: Vec<String>,
    pub prompt: String,
}

/// Annotate the base dataset using the configured mock provider.
pub fn annotate(cfg: &RunConfig) -> Result<(Dataset, AnnotationReport)> {
    match cfg.annotation.provider.kind {
        ProviderKind::Mock => annotate_with(cfg, &MockProvider::with_benchmark(&cfg.benchmark)),
        ProviderKind::External => Err(TideError::InvalidConfig(
            "the external provider has no built-in transport; call annotate_with from the library".into(),
        )),
    }
}

/// Annotate with an arbitrary concept provider. The provider's concept names
/// must exist in the dataset vocabulary.
pub fn annotate_with(cfg: &RunConfig, provider: &dyn ConceptProvider) -> Result<(Dataset, AnnotationReport)> {
    let base = Dataset::open(&data_dir(cfg))?;
    let index = base.index();
    let vocabulary: BTreeMap<&str, usize> = index.concepts.iter().map(|k| (k.name.as_str(), k.id.0)).collect();
    let mut records = Vec::new();
    for class in &index.classes {
        let names = provider.list_concepts(&class.name)?;
        for n in &names {
            let id = vocabulary
                .get(n.as_str())
                .ok_or_else(|| TideError::InvalidInput(format!("provider concept `{n}` is not in the vocabulary")))?;
            if !class.concepts.iter().any(|k| k.0 == *id) {
                return Err(TideError::InvalidInput(format!("concept `{n}` does not belong to class {}", class.name)));
            }
        }
        records.push(ExemplarRecord {
            prompt: build_prompt(&class.name, &names, cfg.annotation.provider.list_style)?,
            class: class.name.clone(),
            concepts: names,
        });
    }
    let extractor = &cfg.annotation.extractor;
    let exemplars = benchmark_exemplars(&cfg.benchmark, extractor)?;
    let cache = cfg.annotation.cache_dir.as_ref().map(TransferCache::new).transpose()?;
    let (ds, report) = annotate_corpus(&base, &exemplars, extractor, &cfg.out.join(ANNOTATED_DIR), cache.as_ref())?;
    write_atomic(&cfg.out.join(EXEMPLARS_FILE), &serde_json::to_vec_pretty(&records)?)?;
    if !report.failures.is_empty() {
        warn!("{} sample(s) could not be annotated", report.failures.len());
    }
    Ok((ds, report))
}

/// Source domains of the run, in configuration order.
pub fn sources(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<String>> {
    let list = if cfg.dataset.sources.is_empty() {
        ds.index().domains.clone()
    } else {
        cfg.dataset.sources.clone()
    };
    for d in &list {
        if !ds.index().domains.contains(d) {
            return Err(TideError::InvalidConfig(format!("dataset has no domain `{d}`")));
        }
    }
    Ok(list)
}

/// Evaluation domains for one source.
pub fn targets(cfg: &RunConfig, ds: &Dataset, source: &str) -> Result<Vec<String>> {
    if cfg.dataset.targets.iter().any(|t| t == source) {
        return Err(TideError::InvalidConfig(format!("domain `{source}` is both source and target")));
    }
    let list: Vec<String> = if cfg.dataset.targets.is_empty() {
        ds.index().domains.iter().filter(|d| *d != source).cloned().collect()
    } else {
        cfg.dataset.targets.clone()
    };
    if list.is_empty() {
        return Err(TideError::InvalidConfig("no target domains".into()));
    }
    if let Some(d) = list.iter().find(|d| !ds.index().domains.contains(d)) {
        return Err(TideError::InvalidConfig(format!("dataset has no domain `{d}`")));
    }
    Ok(list)
}

fn load_split(ds: &Dataset, domain: &str, split: Split) -> Result<Vec<Sample>> {
    let samples = ds.load_all(Some(domain), Some(split))?;
    if samples.is_empty() {
        return Err(TideError::InvalidInput(format!("domain {domain} has no {} samples", split.as_str())));
    }
    Ok(samples)
}

fn empty_table() -> ImportantConceptTable {
    ImportantConceptTable {
        tau: 0.0,
        classes: Vec::new(),
        warnings: Vec::new(),
    }
}

/// Train (or finish, or reuse) one model. A complete checkpoint with the same
/// configuration is reused; a partial one is resumed when `resume` is set.
fn fit(
    samples: &[Sample],
    ds: &Dataset,
    table: &ImportantConceptTable,
    config: &TrainConfig,
    dir: &Path,
    resume: bool,
) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_FILE);
    let mut options = TrainOptions {
        out_dir: Some(dir.to_path_buf()),
        ..TrainOptions::default()
    };
    if path.exists() {
        let ckpt = Checkpoint::load(&path)?;
        let same = ckpt.config_hash == config.hash() && ckpt.table == *table;
        if same && ckpt.state.step == config.total_steps(samples.len()) {
            info!("reusing {}", path.display());
            return Ok(ckpt);
        }
        if same && resume {
            info!("resuming {} from step {}", path.display(), ckpt.state.step);
            options.resume = Some(ckpt);
        } else {
            fs::remove_dir_all(dir).map_err(|e| TideError::io(dir, e))?;
        }
    }
    let outcome = train(samples, table, ds.num_classes(), ds.num_concepts(), config, &options)?;
    Ok(outcome.checkpoint)
}

/// Train the class-only model on `source` and derive the important-concept sets.
pub fn discover(cfg: &RunConfig, ds: &Dataset, source: &str, resume: bool) -> Result<ImportantConceptTable> {
    let dir = cfg.out.join(source).join(DISCOVERY_DIR);
    let samples = load_split(ds, source, Split::Train)?;
    let config = TrainConfig {
        weights: LossWeights::erm(),
        ..cfg.train.clone()
    };
    let ckpt = fit(&samples, ds, &empty_table(), &config, &dir, resume)?;
    let table = discover_concepts(&ckpt.model()?, &samples, ds.num_classes(), cfg.discovery.tau)?;
    for w in &table.warnings {
        warn!("{w}");
    }
    table.save(&dir.join(TABLE_FILE))?;
    Ok(table)
}

/// A trained model with the artifacts verification needs.
pub struct ModelRun {
    pub dir: PathBuf,
    pub label: String,
    pub checkpoint: Checkpoint,
    pub store: SignatureStore,
}

impl ModelRun {
    pub fn model(&self) -> Result<TideModel> {
        self.checkpoint.model()
    }
}

/// Discover, train with the ablated objective and build concept signatures.
pub fn train_source(
    cfg: &RunConfig,
    ds: &Dataset,
    source: &str,
    ablations: &BTreeSet<Ablation>,
    resume: bool,
) -> Result<ModelRun> {
    let table = discover(cfg, ds, source, resume)?;
    let weights = apply_ablations(&cfg.train.weights, ablations);
    let config = TrainConfig {
        weights,
        ..cfg.train.clone()
    };
    let dir = model_dir(cfg, source, &weights);
    let samples = load_split(ds, source, Split::Train)?;
    let checkpoint = fit(&samples, ds, &table, &config, &dir, resume)?;
    let model = checkpoint.model()?;
    let store = build_signatures(&model, &samples, &table.all_important(), source, &checkpoint.config_hash)?;
    store.save(&dir.join(SIGNATURES_FILE))?;
    Ok(ModelRun {
        dir,
        label: objective_label(&weights),
        checkpoint,
        store,
    })
}

/// Load a model trained earlier by [`train_source`].
pub fn load_run(cfg: &RunConfig, source: &str, ablations: &BTreeSet<Ablation>) -> Result<ModelRun> {
    let weights = apply_ablations(&cfg.train.weights, ablations);
    let dir = model_dir(cfg, source, &weights);
    let checkpoint = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let store = SignatureStore::load(&dir.join(SIGNATURES_FILE))?;
    if store.config_hash != checkpoint.config_hash {
        return Err(TideError::InvalidConfig(format!(
            "{}: signatures were built for a different checkpoint",
            dir.display()
        )));
    }
    Ok(ModelRun {
        dir,
        label: objective_label(&weights),
        checkpoint,
        store,
    })
}

fn write_traces(path: &Path, traces: &[CorrectionTrace]) -> Result<()> {
    let mut text = String::new();
    for t in traces {
        text.push_str(&serde_json::to_string(t)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Run correction on every target test sample; returns the traces with true labels.
pub fn correct_targets(
    cfg: &RunConfig,
    ds: &Dataset,
    run: &ModelRun,
) -> Result<BTreeMap<String, Vec<(CorrectionTrace, ClassId)>>> {
    let model = run.model()?;
    let mut out = BTreeMap::new();
    for domain in targets(cfg, ds, &run.checkpoint.source_domain)? {
        let samples = load_split(ds, &domain, Split::Test)?;
        let traces = correct_samples(&model, &samples, &run.checkpoint.table, &run.store, &cfg.correction)?;
        out.insert(domain, traces.into_iter().zip(samples.iter().map(|s| s.class_id)).collect());
    }
    Ok(out)
}

/// Correction traces and summary for a trained model, written beside it.
pub fn correct(cfg: &RunConfig, ds: &Dataset, run: &ModelRun) -> Result<CorrectionReport> {
    let by_domain = correct_targets(cfg, ds, run)?;
    let all: Vec<(CorrectionTrace, ClassId)> = by_domain.into_values().flatten().collect();
    let traces: Vec<CorrectionTrace> = all.iter().map(|(t, _)| t.clone()).collect();
    write_traces(&run.dir.join(TRACES_FILE), &traces)?;
    let report = correction_report(&all)?;
    write_atomic(&run.dir.join(CORRECTION_REPORT_FILE), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Accuracy and overlap on every target domain, optionally with correction.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, run: &ModelRun, with_correction: bool) -> Result<EvalReport> {
    let model = run.model()?;
    let source = run.checkpoint.source_domain.clone();
    let mut corrected = if with_correction {
        Some(correct_targets(cfg, ds, run)?)
    } else {
        None
    };
    let mut domains = Vec::new();
    let mut all_targets = Vec::new();
    for domain in targets(cfg, ds, &source)? {
        let samples = load_split(ds, &domain, Split::Test)?;
        let post = corrected.as_ref().map(|c| {
            let pairs = &c[&domain];
            pairs.iter().filter(|(t, y)| t.final_class == *y).count() as f64 / pairs.len() as f64
        });
        domains.push(DomainResult {
            domain: domain.clone(),
            count: samples.len(),
            accuracy: accuracy(&model, &samples)?,
            post_correction_accuracy: post,
            mean_overlap: mean_overlap(&model, &samples)?,
        });
        all_targets.extend(samples);
    }
    let correction = match corrected.take() {
        Some(c) => {
            let all: Vec<(CorrectionTrace, ClassId)> = c.into_values().flatten().collect();
            let traces: Vec<CorrectionTrace> = all.iter().map(|(t, _)| t.clone()).collect();
            write_traces(&run.dir.join(TRACES_FILE), &traces)?;
            Some(correction_report(&all)?)
        }
        None => None,
    };
    let report = EvalReport::new(
        run.label.clone(),
        source,
        domains,
        correction,
        concept_overlaps(&model, &all_targets)?,
    )?;
    write_atomic(&run.dir.join(EVAL_REPORT_FILE), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Write one row per (sample, concept): sample id, domain, concept id, feature values.
pub fn export_features(run: &ModelRun, samples: &[Sample], path: &Path) -> Result<Vec<FeatureRow>> {
    let model = run.model()?;
    let rows = export_concept_features(&model, samples)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "domain".into(), "concept_id".into()];
    header.extend((0..model.feature_channels()).map(|c| format!("f{c}")));
    let csv_err = |e: csv::Error| TideError::Serde(e.to_string());
    writer.write_record(&header).map_err(csv_err)?;
    for r in &rows {
        let mut fields = vec![r.vector.source_sample_id.clone(), r.domain.clone(), r.vector.concept_id.0.to_string()];
        fields.extend(r.vector.data.iter().map(f64::to_string));
        writer.write_record(&fields).map_err(csv_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| TideError::Serde(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlaySummary {
    pub written: Vec<PathBuf>,
    pub unknown: Vec<String>,
    pub warnings: Vec<String>,
}

/// Nearest-neighbour upsampled saliency alpha-blended in red over the image.
pub fn render_overlay(image: &crate::synthbench::RgbImage, map: &SaliencyMap, scale: usize) -> Vec<u8> {
    let (h, w) = (image.height * scale, image.width * scale);
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (iy, ix) = (y / scale, x / scale);
            let s = map.get(iy * map.height / image.height, ix * map.width / image.width);
            let a = 0.6 * s;
            let px = &image.data[(iy * image.width + ix) * 3..][..3];
            let heat = [255.0, 255.0 * (1.0 - s), 0.0];
            for c in 0..3 {
                out.push(((1.0 - a) * px[c] as f64 + a * heat[c]).round() as u8);
            }
        }
    }
    out
}

/// Class and per-concept saliency overlays for the given samples.
pub fn overlay(ds: &Dataset, run: &ModelRun, sample_ids: &[String], out_dir: &Path) -> Result<OverlaySummary> {
    let model = run.model()?;
    let mut summary = OverlaySummary::default();
    for id in sample_ids {
        let Some(record) = ds.record(id) else {
            warn!("unknown sample {id}");
            summary.unknown.push(id.clone());
            continue;
        };
        let sample = ds.load(record)?;
        let inspection = model.inspect(&sample.image.to_image())?;
        let mut targets = vec![(SaliencyTarget::Class(inspection.predicted_class()), "class".to_string())];
        targets.extend(sample.concept_ids.iter().map(|k| (SaliencyTarget::Concept(*k), format!("concept{}", k.0))));
        for (target, name) in targets {
            let map = gradcam_inspected(&model, &inspection, target)?;
            if map.is_degenerate() {
                let msg = format!("{id}: degenerate {name} saliency");
                warn!("{msg}");
                summary.warnings.push(msg);
            }
            let rgb = render_overlay(&sample.image, &map, OVERLAY_SCALE);
            let png = encode_png_rgb(sample.image.width * OVERLAY_SCALE, sample.image.height * OVERLAY_SCALE, &rgb)?;
            let path = out_dir.join(format!("{id}_{name}.png"));
            write_atomic(&path, &png)?;
            summary.written.push(path);
        }
    }
    Ok(summary)
}

/// Collect every evaluation report under the output directory into a markdown table.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let mut reports = Vec::new();
    let entries = fs::read_dir(&cfg.out).map_err(|e| TideError::io(&cfg.out, e))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    for source_dir in dirs {
        let Ok(inner) = fs::read_dir(&source_dir) else { continue };
        let mut runs: Vec<PathBuf> = inner.filter_map(|e| e.ok().map(|e| e.path().join(EVAL_REPORT_FILE))).collect();
        runs.sort();
        for path in runs.into_iter().filter(|p| p.is_file()) {
            let bytes = fs::read(&path).map_err(|e| TideError::io(&path, e))?;
            reports.push(serde_json::from_slice::<EvalReport>(&bytes)?);
        }
    }
    if reports.is_empty() {
        return Err(TideError::EmptyReport);
    }
    let mut text = String::from("| source | objective | per-domain accuracy | target average | corrected average | target overlap |\n|---|---|---|---|---|---|\n");
    for r in &reports {
        let per: Vec<String> = r.domains.iter().map(|d| format!("{} {:.2}", d.domain, 100.0 * d.accuracy)).collect();
        let post = r.post_correction_average.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        writeln!(
            text,
            "| {} | {} | {} | {:.2} | {post} | {:.3} |",
            r.source_domain,
            r.label,
            per.join(", "),
            100.0 * r.target_average,
            r.mean_target_overlap()
        )
        .expect("write to string");
    }
    write_atomic(&cfg.out.join(REPORT_FILE), text.as_bytes())?;
    Ok(text)
}
