//! Concept signatures, signature-based verification and iterative test-time
//! correction.
//!
//! A prediction is verified by pooling the feature volume with each important
//! concept's saliency map and comparing the result to that concept's signature.
//! Flagged predictions are corrected by cumulatively suppressing the cells the
//! current class attends to and re-predicting on the masked image.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::io::write_atomic;
use crate::primitives::{
    binarize, cosine_distance_or_max, ClassId, ConceptId, ConceptVector, FeatureVolume, Image,
    SaliencyTarget, Signature,
};
use crate::saliency::{gradcam_inspected, ConceptModel, ImportantConceptTable, Inspection};
use crate::synthbench::Sample;
use crate::training::{concept_feature, pool_weighted};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagRule {
    /// Flag when any important concept is farther than the threshold.
    #[default]
    Any,
    /// Flag only when every important concept is.
    All,
}

/// Which feature volume the masked-image concept saliency pools during correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    /// Features of the unmasked test image.
    #[default]
    Original,
    /// Features recomputed on the masked image.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub delta: f64,
    pub max_iters: usize,
    /// Threshold applied to the class saliency map to pick the cells to suppress.
    pub binarize_threshold: f64,
    pub flag_rule: FlagRule,
    pub pool_source: PoolSource,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            delta: 0.1,
            max_iters: 10,
            binarize_threshold: 0.5,
            flag_rule: FlagRule::Any,
            pool_source: PoolSource::Original,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(TideError::InvalidConfig("delta must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(TideError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(TideError::InvalidConfig("binarize_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureStore {
    pub source_domain: String,
    pub config_hash: String,
    pub signatures: BTreeMap<ConceptId, Signature>,
}

impl SignatureStore {
    pub fn get(&self, concept: ConceptId) -> Option<&Signature> {
        self.signatures.get(&concept)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TideError::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn require(&self, concept: ConceptId) -> Result<&Signature> {
        self.get(concept)
            .ok_or(TideError::MissingConceptSupport(concept.0))
    }
}

/// Arithmetic mean of pooled concept features.
pub fn signature_from_vectors(concept: ConceptId, vectors: &[ConceptVector]) -> Result<Signature> {
    let first = vectors.first().ok_or(TideError::MissingConceptSupport(concept.0))?;
    let mut sum = vec![0.0; first.data.len()];
    for v in vectors {
        if v.concept_id != concept || v.data.len() != sum.len() {
            return Err(TideError::InvalidInput(format!(
                "vector from {} does not belong to {concept}",
                v.source_sample_id
            )));
        }
        for (s, x) in sum.iter_mut().zip(&v.data) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(Signature {
        concept_id: concept,
        support_count: vectors.len(),
        data: sum.into_iter().map(|s| s / n).collect(),
    })
}

/// Mean ground-truth-mask-pooled feature of every concept in `concepts` over
/// the source samples that contain it.
pub fn build_signatures<M: ConceptModel + Sync + ?Sized>(
    model: &M,
    samples: &[Sample],
    concepts: &[ConceptId],
    source_domain: &str,
    config_hash: &str,
) -> Result<SignatureStore> {
    let per_sample: Vec<Vec<ConceptVector>> = samples
        .par_iter()
        .map(|s| {
            let wanted: Vec<_> = s
                .masks
                .iter()
                .filter(|m| concepts.contains(&m.concept_id) && !m.is_empty())
                .collect();
            if wanted.is_empty() {
                return Ok(Vec::new());
            }
            let features = model.inspect(&s.image.to_image())?.features;
            wanted
                .into_iter()
                .map(|m| concept_feature(&features, m, &s.sample_id))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut grouped: BTreeMap<ConceptId, Vec<ConceptVector>> = BTreeMap::new();
    for v in per_sample.into_iter().flatten() {
        grouped.entry(v.concept_id).or_default().push(v);
    }
    let mut signatures = BTreeMap::new();
    for &k in concepts {
        let vectors = grouped.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        signatures.insert(k, signature_from_vectors(k, vectors)?);
    }
    Ok(SignatureStore {
        source_domain: source_domain.to_string(),
        config_hash: config_hash.to_string(),
        signatures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDistance {
    pub concept: ConceptId,
    pub distance: f64,
}

/// Cosine distance between each important concept's saliency-pooled feature and
/// its signature.
pub fn concept_distances<M: ConceptModel + ?Sized>(
    model: &M,
    inspection: &Inspection,
    class: ClassId,
    table: &ImportantConceptTable,
    store: &SignatureStore,
) -> Result<Vec<ConceptDistance>> {
    pooled_distances(model, inspection, &inspection.features, class, table, store)
}

/// Like [`concept_distances`], but pooling `features` with the saliency of `inspection`.
fn pooled_distances<M: ConceptModel + ?Sized>(
    model: &M,
    inspection: &Inspection,
    features: &FeatureVolume,
    class: ClassId,
    table: &ImportantConceptTable,
    store: &SignatureStore,
) -> Result<Vec<ConceptDistance>> {
    table
        .important(class)
        .iter()
        .map(|&k| {
            let signature = store.require(k)?;
            let saliency = gradcam_inspected(model, inspection, SaliencyTarget::Concept(k))?;
            let pooled = pool_weighted(features, &saliency.data)?;
            Ok(ConceptDistance {
                concept: k,
                distance: cosine_distance_or_max(&pooled, &signature.data)?,
            })
        })
        .collect()
}

fn is_flagged(distances: &[ConceptDistance], config: &CorrectionConfig) -> bool {
    match config.flag_rule {
        FlagRule::Any => distances.iter().any(|d| d.distance > config.delta),
        FlagRule::All => !distances.is_empty() && distances.iter().all(|d| d.distance > config.delta),
    }
}

fn any_matches(distances: &[ConceptDistance], delta: f64) -> bool {
    distances.iter().any(|d| d.distance <= delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub class: ClassId,
    pub distances: Vec<ConceptDistance>,
    pub flagged: bool,
}

pub fn verify<M: ConceptModel + ?Sized>(
    model: &M,
    image: &Image,
    table: &ImportantConceptTable,
    store: &SignatureStore,
    config: &CorrectionConfig,
) -> Result<Verification> {
    let inspection = model.inspect(image)?;
    verify_inspected(model, &inspection, table, store, config)
}

pub fn verify_inspected<M: ConceptModel + ?Sized>(
    model: &M,
    inspection: &Inspection,
    table: &ImportantConceptTable,
    store: &SignatureStore,
    config: &CorrectionConfig,
) -> Result<Verification> {
    let class = inspection.predicted_class();
    let distances = concept_distances(model, inspection, class, table, store)?;
    let flagged = is_flagged(&distances, config);
    Ok(Verification {
        class,
        distances,
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "iteration")]
pub enum Outcome {
    NotFlagged,
    CorrectedAt(usize),
    ExhaustedFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// Size of the cumulative suppressed-cell set after this iteration's update.
    pub masked_cells: usize,
    pub prediction: ClassId,
    pub distances: Vec<ConceptDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub initial: ClassId,
    pub initial_distances: Vec<ConceptDistance>,
    pub iterations: Vec<IterationRecord>,
    pub outcome: Outcome,
    pub final_class: ClassId,
}

impl CorrectionTrace {
    pub fn flagged(&self) -> bool {
        self.outcome != Outcome::NotFlagged
    }
}

/// Multiply the image by the complement of a grid mask, replicated to pixels.
pub fn suppress_cells(image: &Image, grid: (usize, usize), suppressed: &[bool]) -> Image {
    let (gh, gw) = grid;
    let mut out = image.clone();
    for r in 0..image.height {
        let gr = r * gh / image.height;
        for c in 0..image.width {
            let gc = c * gw / image.width;
            if suppressed[gr * gw + gc] {
                let start = (r * image.width + c) * image.channels;
                out.data[start..start + image.channels].fill(0.0);
            }
        }
    }
    out
}

/// Verify the raw prediction and, when flagged, run iterative correction.
pub fn correct<M: ConceptModel + ?Sized>(
    model: &M,
    image: &Image,
    table: &ImportantConceptTable,
    store: &SignatureStore,
    config: &CorrectionConfig,
) -> Result<CorrectionTrace> {
    config.validate()?;
    let inspection = model.inspect(image)?;
    let check = verify_inspected(model, &inspection, table, store, config)?;
    let initial = check.class;
    let mut trace = CorrectionTrace {
        sample_id: None,
        initial,
        initial_distances: check.distances,
        iterations: Vec::new(),
        outcome: Outcome::NotFlagged,
        final_class: initial,
    };
    if !check.flagged {
        return Ok(trace);
    }
    let grid = (inspection.features.height, inspection.features.width);
    let mut suppressed = vec![false; grid.0 * grid.1];
    let original = inspection.features.clone();
    let mut current = inspection;
    trace.outcome = Outcome::ExhaustedFallback;
    for t in 1..=config.max_iters {
        let class = current.predicted_class();
        let saliency = gradcam_inspected(model, &current, SaliencyTarget::Class(class))?;
        let mask = binarize(&saliency, config.binarize_threshold, ConceptId(0))?;
        for (s, &m) in suppressed.iter_mut().zip(&mask.data) {
            *s |= m == 1;
        }
        if suppressed.iter().all(|&s| s) {
            break;
        }
        current = model.inspect(&suppress_cells(image, grid, &suppressed))?;
        let prediction = current.predicted_class();
        let pool = match config.pool_source {
            PoolSource::Original => &original,
            PoolSource::Masked => &current.features,
        };
        let distances = pooled_distances(model, &current, pool, prediction, table, store)?;
        let matched = any_matches(&distances, config.delta);
        trace.iterations.push(IterationRecord {
            t,
            masked_cells: suppressed.iter().filter(|&&s| s).count(),
            prediction,
            distances,
        });
        if matched {
            trace.outcome = Outcome::CorrectedAt(t);
            trace.final_class = prediction;
            break;
        }
    }
    Ok(trace)
}

/// Run [`correct`] on every sample in parallel; traces keep input order.
pub fn correct_samples<M: ConceptModel + Sync + ?Sized>(
    model: &M,
    samples: &[Sample],
    table: &ImportantConceptTable,
    store: &SignatureStore,
    config: &CorrectionConfig,
) -> Result<Vec<CorrectionTrace>> {
    samples
        .par_iter()
        .map(|s| {
            let mut trace = correct(model, &s.image.to_image(), table, store, config)?;
            trace.sample_id = Some(s.sample_id.clone());
            Ok(trace)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub count: usize,
    pub unflagged_fraction: f64,
    /// Accuracy among unflagged predictions; `None` when every prediction was flagged.
    pub unflagged_precision: Option<f64>,
    /// Fraction of flagged cases whose final class is correct; `None` when nothing was flagged.
    pub flagged_converged: Option<f64>,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
}

pub fn correction_report(traces: &[(CorrectionTrace, ClassId)]) -> Result<CorrectionReport> {
    if traces.is_empty() {
        return Err(TideError::EmptyReport);
    }
    let n = traces.len() as f64;
    let frac = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let unflagged: Vec<_> = traces.iter().filter(|(t, _)| !t.flagged()).collect();
    let flagged: Vec<_> = traces.iter().filter(|(t, _)| t.flagged()).collect();
    Ok(CorrectionReport {
        count: traces.len(),
        unflagged_fraction: unflagged.len() as f64 / n,
        unflagged_precision: frac(
            unflagged.iter().filter(|(t, y)| t.initial == *y).count(),
            unflagged.len(),
        ),
        flagged_converged: frac(
            flagged.iter().filter(|(t, y)| t.final_class == *y).count(),
            flagged.len(),
        ),
        pre_accuracy: traces.iter().filter(|(t, y)| t.initial == *y).count() as f64 / n,
        post_accuracy: traces.iter().filter(|(t, y)| t.final_class == *y).count() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::ClassConcepts;

    fn dist(k: usize, d: f64) -> ConceptDistance {
        ConceptDistance {
            concept: ConceptId(k),
            distance: d,
        }
    }

    fn vector(k: usize, data: Vec<f64>) -> ConceptVector {
        ConceptVector {
            concept_id: ConceptId(k),
            source_sample_id: "s".into(),
            data,
        }
    }

    #[test]
    fn signature_of_one_is_itself() {
        let s = signature_from_vectors(ConceptId(1), &[vector(1, vec![0.5, -2.0])]).unwrap();
        assert_eq!(s.data, vec![0.5, -2.0]);
        assert_eq!(s.support_count, 1);
    }

    #[test]
    fn signature_is_arithmetic_mean() {
        let s = signature_from_vectors(ConceptId(0), &[vector(0, vec![1.0, 2.0]), vector(0, vec![3.0, 4.0])]).unwrap();
        assert_eq!(s.data, vec![2.0, 3.0]);
    }

    #[test]
    fn empty_support_is_an_error() {
        assert!(matches!(
            signature_from_vectors(ConceptId(4), &[]),
            Err(TideError::MissingConceptSupport(4))
        ));
    }

    #[test]
    fn flag_rules() {
        let cfg = CorrectionConfig::default();
        assert!(!is_flagged(&[dist(0, 0.05), dist(1, 0.1), dist(2, 0.0)], &cfg));
        assert!(is_flagged(&[dist(0, 0.05), dist(1, 0.1 + 1e-9), dist(2, 0.0)], &cfg));
        let all = CorrectionConfig {
            flag_rule: FlagRule::All,
            ..cfg
        };
        assert!(!is_flagged(&[dist(0, 0.5), dist(1, 0.05)], &all));
        assert!(is_flagged(&[dist(0, 0.5), dist(1, 0.2)], &all));
    }

    #[test]
    fn config_validation() {
        assert!(CorrectionConfig::default().validate().is_ok());
        assert!(CorrectionConfig { delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(CorrectionConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        let d = CorrectionConfig::default();
        assert_eq!((d.delta, d.max_iters), (0.1, 10));
    }

    #[test]
    fn report_on_perfect_unflagged_predictions() {
        let trace = CorrectionTrace {
            sample_id: None,
            initial: ClassId(1),
            initial_distances: vec![],
            iterations: vec![],
            outcome: Outcome::NotFlagged,
            final_class: ClassId(1),
        };
        let r = correction_report(&[(trace.clone(), ClassId(1)), (trace, ClassId(1))]).unwrap();
        assert_eq!(r.unflagged_precision, Some(1.0));
        assert_eq!(r.pre_accuracy, r.post_accuracy);
        assert_eq!(r.flagged_converged, None);
        assert!(matches!(correction_report(&[]), Err(TideError::EmptyReport)));
    }

    #[test]
    fn suppression_replicates_cells() {
        let img = Image::filled(4, 4, 1, 1.0);
        let out = suppress_cells(&img, (2, 2), &[false, true, false, false]);
        assert_eq!(
            out.data,
            vec![1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 1., 1., 1., 1., 1., 1.]
        );
    }

    /// Two classes over a 1x2 grid. Each cell's features come from its pixel
    /// intensity; class 0 reads the left cell, class 1 the right one, and
    /// concept `k` mirrors class `k`.
    struct TwoCell;

    impl ConceptModel for TwoCell {
        fn num_classes(&self) -> usize {
            2
        }
        fn num_concepts(&self) -> usize {
            2
        }
        fn inspect(&self, image: &Image) -> Result<Inspection> {
            let left = image.data[0];
            let right = image.data[1];
            // channel 0 fires on the left cell, channel 1 on the right
            let features = FeatureVolume::new(1, 2, 2, vec![2.0 * left, 0.0, 0.0, right])?;
            Ok(Inspection {
                class_logits: vec![2.0 * left, right],
                concept_scores: vec![2.0 * left, right],
                features,
            })
        }
        fn target_gradient(&self, _: &Inspection, target: SaliencyTarget) -> Result<FeatureVolume> {
            let k = match target {
                SaliencyTarget::Class(c) => c.0,
                SaliencyTarget::Concept(k) => k.0,
            };
            let mut g = vec![0.0; 4];
            g[k] = 0.5;
            g[2 + k] = 0.5;
            FeatureVolume::new(1, 2, 2, g)
        }
    }

    fn two_cell_setup() -> (ImportantConceptTable, SignatureStore) {
        let table = ImportantConceptTable {
            tau: 0.0,
            classes: (0..2)
                .map(|c| ClassConcepts {
                    class_id: ClassId(c),
                    important: vec![ConceptId(c)],
                    scores: vec![],
                    fallback: false,
                })
                .collect(),
            warnings: vec![],
        };
        let mut signatures = BTreeMap::new();
        // class 0's concept signature points away from what the model produces
        signatures.insert(ConceptId(0), Signature { concept_id: ConceptId(0), support_count: 1, data: vec![0.0, 1.0] });
        signatures.insert(ConceptId(1), Signature { concept_id: ConceptId(1), support_count: 1, data: vec![0.0, 1.0] });
        let store = SignatureStore {
            source_domain: "plain".into(),
            config_hash: String::new(),
            signatures,
        };
        (table, store)
    }

    #[test]
    fn masking_the_salient_cell_flips_to_matching_class() {
        let (table, store) = two_cell_setup();
        let image = Image::new(1, 2, 1, vec![1.0, 1.0]).unwrap();
        let trace = correct(&TwoCell, &image, &table, &store, &CorrectionConfig::default()).unwrap();
        assert_eq!(trace.initial, ClassId(0));
        assert_eq!(trace.outcome, Outcome::CorrectedAt(1));
        assert_eq!(trace.final_class, ClassId(1));
        assert_eq!(trace.iterations[0].masked_cells, 1);
    }

    #[test]
    fn unmatched_signatures_exhaust_and_fall_back() {
        let (table, mut store) = two_cell_setup();
        store.signatures.get_mut(&ConceptId(1)).unwrap().data = vec![1.0, 0.0];
        let image = Image::new(1, 2, 1, vec![1.0, 1.0]).unwrap();
        let trace = correct(&TwoCell, &image, &table, &store, &CorrectionConfig::default()).unwrap();
        assert_eq!(trace.outcome, Outcome::ExhaustedFallback);
        assert_eq!(trace.final_class, trace.initial);
        assert!(trace.iterations.len() <= 10);
        let counts: Vec<usize> = trace.iterations.iter().map(|r| r.masked_cells).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn unflagged_prediction_passes_through() {
        let (table, mut store) = two_cell_setup();
        store.signatures.get_mut(&ConceptId(0)).unwrap().data = vec![1.0, 0.0];
        let image = Image::new(1, 2, 1, vec![1.0, 1.0]).unwrap();
        let trace = correct(&TwoCell, &image, &table, &store, &CorrectionConfig::default()).unwrap();
        assert_eq!(trace.outcome, Outcome::NotFlagged);
        assert_eq!(trace.final_class, ClassId(0));
        assert!(trace.iterations.is_empty());
    }
}
