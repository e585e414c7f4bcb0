//! Evaluation: accuracy, saliency/mask overlap, concept feature export and
//! cluster separation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::CorrectionReport;
use crate::error::{Result, TideError};
use crate::primitives::{euclidean_distance, ClassId, ConceptId, ConceptVector, SaliencyTarget};
use crate::saliency::{gradcam_inspected, overlap, ConceptModel};
use crate::synthbench::Sample;
use crate::training::concept_feature;

pub fn predict<M: ConceptModel + Sync + ?Sized>(model: &M, samples: &[Sample]) -> Result<Vec<ClassId>> {
    samples
        .par_iter()
        .map(|s| Ok(model.inspect(&s.image.to_image())?.predicted_class()))
        .collect()
}

pub fn accuracy<M: ConceptModel + Sync + ?Sized>(model: &M, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TideError::InvalidInput("accuracy of an empty sample set".into()));
    }
    let preds = predict(model, samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.class_id).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Overlap of each present concept's saliency map with its ground-truth mask,
/// averaged per concept. Empty masks are skipped.
pub fn concept_overlaps<M: ConceptModel + Sync + ?Sized>(
    model: &M,
    samples: &[Sample],
) -> Result<BTreeMap<ConceptId, f64>> {
    let per_sample: Vec<Vec<(ConceptId, f64)>> = samples
        .par_iter()
        .map(|s| {
            let inspection = model.inspect(&s.image.to_image())?;
            s.masks
                .iter()
                .filter(|m| !m.is_empty())
                .map(|m| {
                    let map = gradcam_inspected(model, &inspection, SaliencyTarget::Concept(m.concept_id))?;
                    Ok((m.concept_id, overlap(&map, m)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<ConceptId, (f64, usize)> = BTreeMap::new();
    for (k, v) in per_sample.into_iter().flatten() {
        let e = sums.entry(k).or_default();
        e.0 += v;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Mean over all (sample, present concept) pairs of the saliency/mask overlap.
pub fn mean_overlap<M: ConceptModel + Sync + ?Sized>(model: &M, samples: &[Sample]) -> Result<f64> {
    let per_sample: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|s| {
            let inspection = model.inspect(&s.image.to_image())?;
            let mut acc = (0.0, 0);
            for m in s.masks.iter().filter(|m| !m.is_empty()) {
                let map = gradcam_inspected(model, &inspection, SaliencyTarget::Concept(m.concept_id))?;
                acc.0 += overlap(&map, m)?;
                acc.1 += 1;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per_sample
        .into_iter()
        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if n == 0 {
        return Err(TideError::InvalidInput("no concept masks to score".into()));
    }
    Ok(sum / n as f64)
}

/// One exported concept feature with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub domain: String,
    pub vector: ConceptVector,
}

/// Ground-truth-mask-pooled feature for every (sample, present concept) pair.
pub fn export_concept_features<M: ConceptModel + Sync + ?Sized>(
    model: &M,
    samples: &[Sample],
) -> Result<Vec<FeatureRow>> {
    let rows: Vec<Vec<FeatureRow>> = samples
        .par_iter()
        .map(|s| {
            let features = model.inspect(&s.image.to_image())?.features;
            s.masks
                .iter()
                .map(|m| {
                    Ok(FeatureRow {
                        domain: s.domain.clone(),
                        vector: concept_feature(&features, m, &s.sample_id)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Mean silhouette coefficient under Euclidean distance.
///
/// Points in singleton clusters score 0. Needs at least two clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(TideError::InvalidInput("points and labels differ in length".into()));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(TideError::InvalidInput("silhouette needs at least two clusters".into()));
    }
    let scores: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for j in 0..points.len() {
                if i != j {
                    *sums.entry(labels[j]).or_default() += euclidean_distance(&points[i], &points[j])?;
                }
            }
            let own = sizes[&labels[i]];
            if own == 1 {
                return Ok(0.0);
            }
            let a = sums.get(&labels[i]).copied().unwrap_or(0.0) / (own - 1) as f64;
            let b = sums
                .iter()
                .filter(|(l, _)| **l != labels[i])
                .map(|(l, s)| s / sizes[l] as f64)
                .fold(f64::INFINITY, f64::min);
            let den = a.max(b);
            Ok(if den > 0.0 { (b - a) / den } else { 0.0 })
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Silhouette of exported concept features clustered by concept id.
pub fn concept_silhouette(rows: &[FeatureRow]) -> Result<f64> {
    let points: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.data.clone()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.vector.concept_id.0).collect();
    silhouette(&points, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: String,
    pub count: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_correction_accuracy: Option<f64>,
    pub mean_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub source_domain: String,
    pub domains: Vec<DomainResult>,
    pub target_average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_correction_average: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<CorrectionReport>,
    pub concept_overlap: BTreeMap<ConceptId, f64>,
}

impl EvalReport {
    /// Assemble a report; averages are recomputed from the per-domain values.
    pub fn new(
        label: impl Into<String>,
        source_domain: impl Into<String>,
        domains: Vec<DomainResult>,
        correction: Option<CorrectionReport>,
        concept_overlap: BTreeMap<ConceptId, f64>,
    ) -> Result<Self> {
        if domains.is_empty() {
            return Err(TideError::EmptyReport);
        }
        let n = domains.len() as f64;
        let target_average = domains.iter().map(|d| d.accuracy).sum::<f64>() / n;
        let post_correction_average = domains
            .iter()
            .map(|d| d.post_correction_accuracy)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Ok(EvalReport {
            label: label.into(),
            source_domain: source_domain.into(),
            domains,
            target_average,
            post_correction_average,
            correction,
            concept_overlap,
        })
    }

    pub fn mean_target_overlap(&self) -> f64 {
        self.domains.iter().map(|d| d.mean_overlap).sum::<f64>() / self.domains.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_of_separated_clusters_is_high() {
        let points = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.1, 0.0]];
        let s = silhouette(&points, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.95, "{s}");
    }

    #[test]
    fn silhouette_matches_hand_computation() {
        // a = 1 for every point; b = 3.5, 2.5, 2.5, 3.5
        let points = vec![vec![0.0], vec![1.0], vec![3.0], vec![4.0]];
        let s = silhouette(&points, &[0, 0, 1, 1]).unwrap();
        let expected = (2.5 / 3.5 + 1.5 / 2.5) / 2.0;
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn silhouette_needs_two_clusters() {
        assert!(silhouette(&[vec![0.0], vec![1.0]], &[3, 3]).is_err());
    }

    #[test]
    fn report_averages_recompute() {
        let d = |name: &str, acc: f64, post: f64| DomainResult {
            domain: name.into(),
            count: 10,
            accuracy: acc,
            post_correction_accuracy: Some(post),
            mean_overlap: 0.5,
        };
        let r = EvalReport::new("full", "plain", vec![d("a", 0.5, 0.6), d("b", 0.7, 0.7)], None, BTreeMap::new()).unwrap();
        assert!((r.target_average - 0.6).abs() < 1e-12);
        assert!((r.post_correction_average.unwrap() - 0.65).abs() < 1e-12);
    }
}
