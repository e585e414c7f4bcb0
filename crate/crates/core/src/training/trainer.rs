//! The training loop: deterministic batching, a producer thread feeding a
//! bounded queue, Adam with warm-up, a line-delimited step log and atomic
//! checkpoints that resume bit-for-bit.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{evaluate_objective, BatchItem, LossBreakdown, LossWeights, TripletRef};
use crate::error::{Result, TideError};
use crate::io::{sha256_hex, write_atomic};
use crate::nn::{Adam, BlockSpec, ModelSpec, TideModel, WarmupSchedule};
use crate::primitives::ConceptId;
use crate::saliency::ImportantConceptTable;
use crate::synthbench::{augment_triplet, mix_seed, AugmentConfig, Sample};

pub const CHECKPOINT_FORMAT: &str = "tide-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";

const PERMUTATION_STREAM: u64 = 0x7065_726d;
const TRIPLET_STREAM: u64 = 0x7472_6970;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub blocks: Vec<BlockSpec>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Number of prepared batches buffered between producer and trainer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            warmup_steps: 1000,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            blocks: ModelSpec::desk_default(1, 1).blocks,
            checkpoint_every: 0,
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(TideError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TideError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TideError::InvalidConfig("lr must be > 0".into()));
        }
        if self.queue_depth == 0 {
            return Err(TideError::InvalidConfig("queue_depth must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(TideError::InvalidConfig("backbone needs at least one block".into()));
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)
    }

    pub fn model_spec(&self, sample: &Sample, num_classes: usize, num_concepts: usize) -> ModelSpec {
        ModelSpec {
            image_height: sample.image.height,
            image_width: sample.image.width,
            input_channels: 3,
            blocks: self.blocks.clone(),
            num_classes,
            num_concepts,
        }
    }

    /// Number of updates in a full run over `num_samples` samples.
    pub fn total_steps(&self, num_samples: usize) -> u64 {
        self.epochs * steps_per_epoch(num_samples, self.batch_size)
    }

    pub fn schedule(&self) -> WarmupSchedule {
        WarmupSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub optimizer: Adam,
    /// Number of completed updates.
    pub step: u64,
    pub schedule: WarmupSchedule,
    /// Batch order and triplet sampling are pure functions of this seed and the step.
    pub seed: u64,
}

impl TrainState {
    pub fn model(&self) -> Result<TideModel> {
        TideModel::from_params(self.spec.clone(), self.params.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub source_domain: String,
    pub state: TrainState,
    pub table: ImportantConceptTable,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TideError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(TideError::Serde(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(TideError::Serde(format!("{}: config hash mismatch", path.display())));
        }
        Ok(ckpt)
    }

    pub fn model(&self) -> Result<TideModel> {
        self.state.model()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub class: f64,
    pub concept: f64,
    pub csa: f64,
    pub lcc: f64,
}

/// Read a line-delimited training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TideError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(TideError::from))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving the checkpoint and the step log.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Stop once this many updates have been applied (before the scheduled end).
    pub stop_at_step: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Records of the updates applied in this call.
    pub history: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn model(&self) -> Result<TideModel> {
        self.checkpoint.model()
    }
}

struct Prepared {
    step: u64,
    sample_ids: Vec<String>,
    items: Vec<BatchItem>,
}

/// Order of sample indices for `epoch`.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, PERMUTATION_STREAM, epoch]));
    order.shuffle(&mut rng);
    order
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

fn prepare_batch(
    samples: &[Sample],
    table: &ImportantConceptTable,
    config: &TrainConfig,
    num_concepts: usize,
    step: u64,
) -> Result<Prepared> {
    let spe = steps_per_epoch(samples.len(), config.batch_size);
    let (epoch, within) = (step / spe, (step % spe) as usize);
    let order = epoch_order(config.seed, epoch, samples.len());
    let start = within * config.batch_size;
    let end = (start + config.batch_size).min(samples.len());
    let batch: Vec<&Sample> = order[start..end].iter().map(|&i| &samples[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, TRIPLET_STREAM, step]));
    let mut items = Vec::with_capacity(batch.len());
    for sample in &batch {
        let mut present = vec![false; num_concepts];
        for k in &sample.concept_ids {
            present[k.0] = true;
        }
        let important: Vec<ConceptId> = table
            .important(sample.class_id)
            .iter()
            .copied()
            .filter(|&k| sample.has_concept(k))
            .collect();
        let triplet = if config.weights.lcc > 0.0 {
            match augment_triplet(sample, &important, &batch, &config.augment, &mut rng) {
                Ok(t) => Some(TripletRef {
                    concept: t.concept,
                    positive: t.positive,
                    negative: t.negative,
                    negative_concept: t.negative_concept,
                }),
                Err(TideError::TripletExhausted) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        items.push(BatchItem {
            image: sample.image.to_image(),
            class: sample.class_id.0,
            concept_present: present,
            masks: sample.masks.clone(),
            csa_concepts: important,
            triplet,
        });
    }
    Ok(Prepared {
        step,
        sample_ids: batch.iter().map(|s| s.sample_id.clone()).collect(),
        items,
    })
}

fn check_inputs(samples: &[Sample], num_classes: usize, num_concepts: usize, config: &TrainConfig) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| TideError::InvalidInput("no training samples".into()))?;
    let needs_masks = config.weights.csa > 0.0 || config.weights.lcc > 0.0;
    for s in samples {
        if s.class_id.0 >= num_classes {
            return Err(TideError::InvalidLabel {
                label: s.class_id.0,
                count: num_classes,
            });
        }
        if let Some(k) = s.concept_ids.iter().find(|k| k.0 >= num_concepts) {
            return Err(TideError::InvalidLabel {
                label: k.0,
                count: num_concepts,
            });
        }
        if (s.image.height, s.image.width) != (first.image.height, first.image.width) {
            return Err(TideError::InvalidInput("training images differ in size".into()));
        }
        if needs_masks && s.concept_ids.iter().any(|&k| s.mask(k).is_none()) {
            return Err(TideError::InvalidConfig(format!(
                "sample {} lacks concept masks required by the saliency or contrastive loss",
                s.sample_id
            )));
        }
    }
    Ok(())
}

fn dump_batch(dir: &Path, prepared: &Prepared, loss: &LossBreakdown) -> PathBuf {
    #[derive(Serialize)]
    struct Dump<'a> {
        step: u64,
        loss: &'a LossBreakdown,
        sample_ids: &'a [String],
    }
    let path = dir.join(format!("nonfinite_step{}.json", prepared.step));
    let dump = Dump {
        step: prepared.step,
        loss,
        sample_ids: &prepared.sample_ids,
    };
    match serde_json::to_vec_pretty(&dump) {
        Ok(bytes) => {
            if let Err(e) = write_atomic(&path, &bytes) {
                warn!("could not write batch dump: {e}");
            }
        }
        Err(e) => warn!("could not encode batch dump: {e}"),
    }
    path
}

/// Train on the samples of one source domain.
pub fn train(
    samples: &[Sample],
    table: &ImportantConceptTable,
    num_classes: usize,
    num_concepts: usize,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_inputs(samples, num_classes, num_concepts, config)?;
    let source_domain = samples[0].domain.clone();
    let spec = config.model_spec(&samples[0], num_classes, num_concepts);
    spec.validate()?;
    let config_hash = config.hash();

    let mut state = match &options.resume {
        Some(ckpt) => {
            if ckpt.config_hash != config_hash {
                return Err(TideError::InvalidConfig(
                    "checkpoint was produced with a different configuration".into(),
                ));
            }
            if ckpt.state.spec != spec {
                return Err(TideError::InvalidConfig("checkpoint model shape differs".into()));
            }
            ckpt.state.clone()
        }
        None => {
            let model = TideModel::new(spec.clone(), config.seed)?;
            TrainState {
                optimizer: Adam::new(model.num_params()),
                params: model.params().to_vec(),
                spec: spec.clone(),
                step: 0,
                schedule: config.schedule(),
                seed: config.seed,
            }
        }
    };

    let spe = steps_per_epoch(samples.len(), config.batch_size);
    let scheduled_end = config.epochs * spe;
    let end = options.stop_at_step.map_or(scheduled_end, |s| s.min(scheduled_end));
    let start = state.step;

    let mut log = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| TideError::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| TideError::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };

    let make_checkpoint = |state: &TrainState| Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.clone(),
        config: config.clone(),
        source_domain: source_domain.clone(),
        state: state.clone(),
        table: table.clone(),
    };

    let mut history = Vec::new();
    let mut model = TideModel::from_params(state.spec.clone(), state.params.clone())?;
    info!(
        "training on {} ({} samples), steps {}..{}",
        source_domain,
        samples.len(),
        start,
        end
    );

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Prepared>>(config.queue_depth);
        scope.spawn(move || {
            for step in start..end {
                let batch = prepare_batch(samples, table, config, num_concepts, step);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });

        for step in start..end {
            let prepared = rx
                .recv()
                .map_err(|_| TideError::InvalidInput("batch producer stopped".into()))??;
            debug_assert_eq!(prepared.step, step);
            let (loss, grad) = evaluate_objective(&model, &prepared.items, &config.weights, true)?;
            if !loss.is_finite() {
                let dir = options.out_dir.clone().unwrap_or_else(std::env::temp_dir);
                let dump = dump_batch(&dir, &prepared, &loss);
                return Err(TideError::NonFiniteLoss { step, dump });
            }
            let grad = grad.expect("gradient requested");
            let lr = state.schedule.lr(step);
            state.optimizer.step(model.params_mut(), &grad, lr);
            state.step = step + 1;
            let record = StepRecord {
                step,
                epoch: step / spe,
                lr,
                total: loss.total,
                class: loss.class,
                concept: loss.concept,
                csa: loss.csa,
                lcc: loss.lcc,
            };
            if let Some((path, w)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n").map_err(|e| TideError::io(&*path, e))?;
            }
            history.push(record);
            if (step + 1) % spe == 0 {
                info!(
                    "epoch {} step {} loss {:.4} (c {:.4} k {:.4} csa {:.4} lcc {:.4})",
                    step / spe,
                    step + 1,
                    loss.total,
                    loss.class,
                    loss.concept,
                    loss.csa,
                    loss.lcc
                );
            }
            let periodic = config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
            if periodic {
                if let Some(dir) = &options.out_dir {
                    state.params.copy_from_slice(model.params());
                    if let Some((path, w)) = log.as_mut() {
                        w.flush().map_err(|e| TideError::io(&*path, e))?;
                    }
                    make_checkpoint(&state).save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        Ok(())
    })?;

    state.params.copy_from_slice(model.params());
    if let Some((path, mut w)) = log.take() {
        w.flush().map_err(|e| TideError::io(&path, e))?;
    }
    let checkpoint = make_checkpoint(&state);
    if let Some(dir) = &options.out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { checkpoint, history })
}
