//! Concept listing, exemplar prompts and correspondence-based transfer of
//! concept masks from one exemplar per class to a whole corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::io::{sha256_hex, write_atomic};
use crate::primitives::{ClassId, ConceptId, ConceptMask, FeatureVolume, Image, Map2};
use crate::synthbench::{render_exemplar, write_derived, BenchmarkConfig, Dataset, Sample};

/// Instruction sent to a language model to list a class's concepts.
pub fn concept_listing_prompt(class_name: &str) -> String {
    format!(
        "List the most visually distinctive and static features of a {class_name} that a \
         classification model would rely on for accurate identification. Focus only on features \
         that are intrinsic to the object itself and truly discriminative for the class, avoiding \
         any features that may be related to the environment or context in which the object is \
         typically found."
    )
}

pub const MIN_CONCEPTS: usize = 3;
pub const MAX_CONCEPTS: usize = 6;

pub trait ConceptProvider {
    /// Ordered, deduplicated concept names for `class_name`.
    fn list_concepts(&self, class_name: &str) -> Result<Vec<String>>;
}

fn dedup(names: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        if !n.is_empty() && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// Fixed lookup table; deterministic and offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProvider {
    pub table: BTreeMap<String, Vec<String>>,
}

impl Default for MockProvider {
    fn default() -> Self {
        let entries: [(&str, [&str; 3]); 6] = [
            ("cat", ["whiskers", "eyes", "ears"]),
            ("dog", ["snout", "ears", "tail"]),
            ("bird", ["beak", "feet", "feathers"]),
            ("squirrel", ["tail", "ears", "claws"]),
            ("hammer", ["claw", "cheek", "face"]),
            ("chair", ["seat", "legs", "backrest"]),
        ];
        MockProvider {
            table: entries
                .iter()
                .map(|(c, ks)| (c.to_string(), ks.iter().map(|k| k.to_string()).collect()))
                .collect(),
        }
    }
}

impl MockProvider {
    /// The default table extended with the benchmark's own classes.
    pub fn with_benchmark(config: &BenchmarkConfig) -> Self {
        let mut p = MockProvider::default();
        for c in &config.classes {
            let names = c.concepts.iter().map(|k| config.concepts[k.0].name.clone()).collect();
            p.table.insert(c.name.clone(), names);
        }
        p
    }
}

impl ConceptProvider for MockProvider {
    fn list_concepts(&self, class_name: &str) -> Result<Vec<String>> {
        self.table
            .get(class_name)
            .map(|v| dedup(v.iter().cloned()))
            .ok_or_else(|| TideError::UnknownClass(class_name.to_string()))
    }
}

/// Failure reported by a transport.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportError {
    pub message: String,
    pub retryable: bool,
    /// Server-requested wait before retrying.
    pub retry_after: Option<Duration>,
}

/// Request/response channel to a hosted language model.
pub trait Transport: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff before attempt `attempt + 1` (1-based `attempt`).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Provider backed by a [`Transport`], with retries and exponential backoff.
pub struct ExternalProvider<T: Transport> {
    transport: T,
    policy: RetryPolicy,
    sleep: Box<dyn Fn(Duration) + Send + Sync>,
}

impl<T: Transport> ExternalProvider<T> {
    pub fn new(transport: T, policy: RetryPolicy) -> Self {
        ExternalProvider {
            transport,
            policy,
            sleep: Box::new(std::thread::sleep),
        }
    }

    /// Replace the sleeping function (tests use a recorder).
    pub fn with_sleep(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }
}

/// Parse a free-text list ("1. beak\n2. feet", "beak, feet and tail", "- beak") into names.
pub fn parse_concept_list(text: &str) -> Vec<String> {
    let items = text
        .split(['\n', ',', ';'])
        .flat_map(|part| part.split(" and "))
        .map(|s| {
            s.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || "-*.)•".contains(c))
                .trim()
                .trim_end_matches('.')
                .trim_start_matches("and ")
                .trim()
                .to_lowercase()
        });
    dedup(items)
}

impl<T: Transport> ConceptProvider for ExternalProvider<T> {
    fn list_concepts(&self, class_name: &str) -> Result<Vec<String>> {
        let prompt = concept_listing_prompt(class_name);
        let max = self.policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.transport.complete(&prompt) {
                Ok(text) => {
                    let mut names = parse_concept_list(&text);
                    if names.len() < MIN_CONCEPTS {
                        return Err(TideError::Provider {
                            message: format!("{} concept(s) returned for {class_name}", names.len()),
                            attempts: attempt,
                            retry_after_ms: None,
                        });
                    }
                    names.truncate(MAX_CONCEPTS);
                    return Ok(names);
                }
                Err(e) => {
                    let wait = e.retry_after.unwrap_or_else(|| self.policy.backoff(attempt));
                    if !e.retryable || attempt >= max {
                        return Err(TideError::Provider {
                            message: e.message,
                            attempts: attempt,
                            retry_after_ms: e.retryable.then_some(wait.as_millis() as u64),
                        });
                    }
                    (self.sleep)(wait);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListStyle {
    /// "a, b, and c"
    #[default]
    Oxford,
    /// "a, b and c"
    Plain,
}

/// Exemplar-generation prompt naming the class and its concepts.
pub fn build_prompt(class_name: &str, concepts: &[String], style: ListStyle) -> Result<String> {
    let list = match concepts {
        [] => return Err(TideError::InvalidInput("prompt needs at least one concept".into())),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => {
            let sep = match style {
                ListStyle::Oxford => ", and ",
                ListStyle::Plain => " and ",
            };
            format!("{}{sep}{last}", init.join(", "))
        }
    };
    Ok(format!("Generate a photo of a {class_name} with its {list}."))
}

/// Dense per-cell descriptors used to match regions between images.
pub trait DenseFeatureExtractor: Sync {
    fn extract(&self, image: &Image) -> Result<FeatureVolume>;
}

/// Deterministic hand-crafted descriptor at a fixed grid.
///
/// Each cell gets a smooth positional code plus three appearance statistics
/// (foreground fraction, mean gradient magnitude, mean darkness), so matches
/// prefer nearby cells with similar local structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockExtractor {
    pub grid: usize,
    pub position_weight: f64,
    pub content_weight: f64,
}

impl Default for MockExtractor {
    fn default() -> Self {
        MockExtractor {
            grid: 7,
            position_weight: 1.0,
            content_weight: 1.0,
        }
    }
}

impl DenseFeatureExtractor for MockExtractor {
    fn extract(&self, image: &Image) -> Result<FeatureVolume> {
        let g = self.grid;
        if g == 0 || !image.height.is_multiple_of(g) || !image.width.is_multiple_of(g) {
            return Err(TideError::InvalidInput(format!(
                "{}x{} image is not divisible into a {g}x{g} grid",
                image.height, image.width
            )));
        }
        let (h, w) = (image.height, image.width);
        let gray: Vec<f64> = (0..h * w)
            .map(|i| image.data[i * image.channels..(i + 1) * image.channels].iter().sum::<f64>() / image.channels as f64)
            .collect();
        // background estimate: median of the border pixels
        let mut border: Vec<f64> = (0..w)
            .flat_map(|c| [gray[c], gray[(h - 1) * w + c]])
            .chain((0..h).flat_map(|r| [gray[r * w], gray[r * w + w - 1]]))
            .collect();
        border.sort_by(f64::total_cmp);
        let background = border[border.len() / 2];
        let (ch, cw) = (h / g, w / g);
        let channels = 11;
        let mut data = Vec::with_capacity(g * g * channels);
        for gr in 0..g {
            for gc in 0..g {
                let (mut fg, mut grad, mut dark) = (0.0, 0.0, 0.0);
                for r in gr * ch..(gr + 1) * ch {
                    for c in gc * cw..(gc + 1) * cw {
                        let v = gray[r * w + c];
                        fg += f64::from(u8::from((v - background).abs() > 0.15));
                        let dx = gray[r * w + (c + 1).min(w - 1)] - gray[r * w + c.saturating_sub(1)];
                        let dy = gray[(r + 1).min(h - 1) * w + c] - gray[r.saturating_sub(1) * w + c];
                        grad += (dx * dx + dy * dy).sqrt();
                        dark += 1.0 - v;
                    }
                }
                let n = (ch * cw) as f64;
                let (y, x) = ((gr as f64 + 0.5) / g as f64, (gc as f64 + 0.5) / g as f64);
                let pw = self.position_weight;
                for f in [1.0, 2.0] {
                    let a = std::f64::consts::PI * f;
                    data.extend([(a * y).sin() * pw, (a * y).cos() * pw, (a * x).sin() * pw, (a * x).cos() * pw]);
                }
                let cw_ = self.content_weight;
                data.extend([fg / n * cw_, grad / n * cw_, dark / n * cw_]);
            }
        }
        FeatureVolume::new(g, g, channels, data)
    }
}

/// One class exemplar: its dense features and soft concept maps at the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarAnnotation {
    pub class_id: ClassId,
    pub features: FeatureVolume,
    pub maps: BTreeMap<ConceptId, Map2>,
}

impl ExemplarAnnotation {
    pub fn new(class_id: ClassId, features: FeatureVolume, maps: BTreeMap<ConceptId, Map2>) -> Result<Self> {
        for (k, m) in &maps {
            if (m.height, m.width) != (features.height, features.width) {
                return Err(TideError::InvalidInput(format!("soft map for {k} does not match the feature grid")));
            }
            if m.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(TideError::InvalidInput(format!("soft map for {k} leaves [0, 1]")));
            }
        }
        Ok(ExemplarAnnotation {
            class_id,
            features,
            maps,
        })
    }

    /// Content hash used to key the transfer cache.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("exemplar serializes"))
    }
}

/// Soft-map value at or above which an exemplar cell is part of the concept.
pub const EXEMPLAR_THRESHOLD: f64 = 0.5;

/// Map every exemplar concept cell to its most cosine-similar target cell and
/// return the union of the matches.
pub fn transfer_mask(exemplar: &ExemplarAnnotation, concept: ConceptId, target: &FeatureVolume) -> Result<ConceptMask> {
    let src = &exemplar.features;
    if src.channels != target.channels {
        return Err(TideError::InvalidInput(format!(
            "exemplar has {} feature channels, target {}",
            src.channels, target.channels
        )));
    }
    let map = exemplar
        .maps
        .get(&concept)
        .ok_or_else(|| TideError::InvalidInput(format!("exemplar of {} has no map for {concept}", exemplar.class_id)))?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target_norms: Vec<f64> = target.data.chunks_exact(target.channels).map(norm).collect();
    let mut out = vec![0u8; target.cells()];
    for (p, &soft) in map.data.iter().enumerate() {
        if soft < EXEMPLAR_THRESHOLD {
            continue;
        }
        let e = src.cell_at(p);
        let en = norm(e);
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (q, t) in target.data.chunks_exact(target.channels).enumerate() {
            let den = en * target_norms[q];
            let sim = if den > 0.0 {
                e.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / den
            } else {
                0.0
            };
            if sim > best_sim {
                best_sim = sim;
                best = q;
            }
        }
        out[best] = 1;
    }
    ConceptMask::new(concept, target.height, target.width, out)
}

/// Exemplars for every benchmark class: the rendered prototype layout stands in
/// for a synthesized image, its soft occupancy maps for cross-attention maps.
pub fn benchmark_exemplars<E: DenseFeatureExtractor + ?Sized>(
    config: &BenchmarkConfig,
    extractor: &E,
) -> Result<Vec<ExemplarAnnotation>> {
    config
        .classes
        .iter()
        .map(|c| {
            let (image, maps) = render_exemplar(config, c.id)?;
            let features = extractor.extract(&image.to_image())?;
            ExemplarAnnotation::new(c.id, features, maps.into_iter().collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub sample_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub annotated: usize,
    pub masks_written: usize,
    pub cache_hits: usize,
    pub failures: Vec<AnnotationFailure>,
}

/// File cache of transferred masks keyed by (exemplar hash, sample hash, concept).
#[derive(Debug, Clone)]
pub struct TransferCache {
    dir: PathBuf,
}

impl TransferCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| TideError::io(&dir, e))?;
        Ok(TransferCache { dir })
    }

    fn path(&self, exemplar: &str, sample: &str, concept: ConceptId) -> PathBuf {
        let key = sha256_hex(format!("{exemplar}:{sample}:{}", concept.0).as_bytes());
        self.dir.join(format!("{key}.mask"))
    }

    fn get(&self, exemplar: &str, sample: &str, concept: ConceptId, grid: (usize, usize)) -> Option<ConceptMask> {
        let bytes = fs::read(self.path(exemplar, sample, concept)).ok()?;
        ConceptMask::new(concept, grid.0, grid.1, bytes).ok()
    }

    fn put(&self, exemplar: &str, sample: &str, mask: &ConceptMask) -> Result<()> {
        write_atomic(&self.path(exemplar, sample, mask.concept_id), &mask.data)
    }
}

fn sample_hash(sample: &Sample) -> String {
    sha256_hex(&sample.image.data)
}

/// Replace each sample's masks with masks transferred from its class exemplar.
///
/// Samples whose extraction or transfer fails keep no masks and are listed in
/// the report; the rest are annotated with one mask per class concept.
pub fn annotate_samples<E: DenseFeatureExtractor + ?Sized>(
    exemplars: &[ExemplarAnnotation],
    samples: &[Sample],
    extractor: &E,
    cache: Option<&TransferCache>,
) -> Result<(Vec<Sample>, AnnotationReport)> {
    let by_class: BTreeMap<ClassId, (&ExemplarAnnotation, String)> =
        exemplars.iter().map(|e| (e.class_id, (e, e.hash()))).collect();
    if let Some(s) = samples.iter().find(|s| !by_class.contains_key(&s.class_id)) {
        return Err(TideError::InvalidInput(format!("no exemplar for class of {}", s.sample_id)));
    }
    let results: Vec<std::result::Result<(Sample, usize), AnnotationFailure>> = samples
        .par_iter()
        .map(|s| {
            let (exemplar, ehash) = &by_class[&s.class_id];
            let shash = sample_hash(s);
            let fail = |e: TideError| AnnotationFailure {
                sample_id: s.sample_id.clone(),
                message: e.to_string(),
            };
            let mut features: Option<FeatureVolume> = None;
            let mut masks = Vec::with_capacity(exemplar.maps.len());
            let mut hits = 0;
            for &k in exemplar.maps.keys() {
                let grid = (exemplar.features.height, exemplar.features.width);
                if let Some(m) = cache.and_then(|c| c.get(ehash, &shash, k, grid)) {
                    hits += 1;
                    masks.push(m);
                    continue;
                }
                if features.is_none() {
                    features = Some(extractor.extract(&s.image.to_image()).map_err(fail)?);
                }
                let m = transfer_mask(exemplar, k, features.as_ref().expect("extracted")).map_err(fail)?;
                if let Some(c) = cache {
                    c.put(ehash, &shash, &m).map_err(fail)?;
                }
                masks.push(m);
            }
            let mut out = s.clone();
            out.concept_ids = masks.iter().map(|m| m.concept_id).collect();
            out.masks = masks;
            Ok((out, hits))
        })
        .collect();
    let mut report = AnnotationReport::default();
    let mut annotated = Vec::with_capacity(samples.len());
    for (r, s) in results.into_iter().zip(samples) {
        match r {
            Ok((sample, hits)) => {
                report.annotated += 1;
                report.masks_written += sample.masks.len();
                report.cache_hits += hits;
                annotated.push(sample);
            }
            Err(f) => {
                report.failures.push(f);
                let mut bare = s.clone();
                bare.concept_ids.clear();
                bare.masks.clear();
                annotated.push(bare);
            }
        }
    }
    Ok((annotated, report))
}

pub const ANNOTATION_REPORT_FILE: &str = "annotation_report.json";

/// Annotate a dataset on disk and write the result as a new dataset at `out_dir`,
/// with the report beside it.
pub fn annotate_corpus<E: DenseFeatureExtractor + ?Sized>(
    dataset: &Dataset,
    exemplars: &[ExemplarAnnotation],
    extractor: &E,
    out_dir: &Path,
    cache: Option<&TransferCache>,
) -> Result<(Dataset, AnnotationReport)> {
    let samples = dataset.load_all(None, None)?;
    let (annotated, report) = annotate_samples(exemplars, &samples, extractor, cache)?;
    let out = write_derived(dataset.index(), &annotated, out_dir)?;
    let report_path = out_dir.with_file_name(format!(
        "{}.{ANNOTATION_REPORT_FILE}",
        out_dir.file_name().and_then(|n| n.to_str()).unwrap_or("annotated")
    ));
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    Ok((out, report))
}
