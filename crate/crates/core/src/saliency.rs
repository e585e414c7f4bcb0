//! GradCAM saliency, the saliency/mask overlap score, and concept discovery.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::nn::TideModel;
use crate::primitives::{
    normalize_map, ClassId, ConceptId, ConceptMask, FeatureVolume, Image, Map2, SaliencyMap,
    SaliencyTarget,
};
use crate::synthbench::Sample;

/// Outputs of one forward pass that saliency and verification need.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub features: FeatureVolume,
    pub class_logits: Vec<f64>,
    pub concept_scores: Vec<f64>,
}

impl Inspection {
    /// Index of the highest class logit (first one on ties).
    pub fn predicted_class(&self) -> ClassId {
        ClassId(argmax(&self.class_logits))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A classifier with a convolutional feature stage and class/concept outputs.
///
/// Implementations must be pure: the same image always yields the same inspection.
pub trait ConceptModel {
    fn num_classes(&self) -> usize;
    fn num_concepts(&self) -> usize;
    fn inspect(&self, image: &Image) -> Result<Inspection>;
    /// Gradient of the target logit with respect to the inspected feature volume.
    fn target_gradient(&self, inspection: &Inspection, target: SaliencyTarget)
        -> Result<FeatureVolume>;
}

impl ConceptModel for TideModel {
    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn num_concepts(&self) -> usize {
        self.spec().num_concepts
    }

    fn inspect(&self, image: &Image) -> Result<Inspection> {
        let fwd = self.forward(image)?;
        Ok(Inspection {
            features: fwd.features,
            class_logits: fwd.class_logits,
            concept_scores: fwd.concept_scores,
        })
    }

    fn target_gradient(
        &self,
        _inspection: &Inspection,
        target: SaliencyTarget,
    ) -> Result<FeatureVolume> {
        self.logit_feature_gradient(target)
    }
}

/// Per-channel GradCAM weights: spatial mean of the gradient.
pub fn gradcam_weights(gradient: &FeatureVolume) -> Vec<f64> {
    let cells = gradient.cells() as f64;
    let mut alpha = vec![0.0; gradient.channels];
    for cell in gradient.data.chunks_exact(gradient.channels) {
        for (a, &g) in alpha.iter_mut().zip(cell) {
            *a += g;
        }
    }
    alpha.iter_mut().for_each(|a| *a /= cells);
    alpha
}

/// Un-normalized GradCAM response `ReLU(sum_l alpha_l F(., ., l))`.
pub fn gradcam_raw(features: &FeatureVolume, alpha: &[f64]) -> Map2 {
    let data = features
        .data
        .chunks_exact(features.channels)
        .map(|cell| {
            cell.iter()
                .zip(alpha)
                .map(|(f, a)| f * a)
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    Map2 {
        height: features.height,
        width: features.width,
        data,
    }
}

/// GradCAM from a feature volume and the target logit's gradient with respect to it.
pub fn gradcam_from_gradient(
    features: &FeatureVolume,
    gradient: &FeatureVolume,
    target: SaliencyTarget,
) -> Result<SaliencyMap> {
    if (features.height, features.width, features.channels)
        != (gradient.height, gradient.width, gradient.channels)
    {
        return Err(TideError::InvalidInput(
            "gradient shape differs from feature volume".into(),
        ));
    }
    let alpha = gradcam_weights(gradient);
    normalize_map(&gradcam_raw(features, &alpha), target)
}

/// GradCAM for an already inspected input.
pub fn gradcam_inspected<M: ConceptModel + ?Sized>(
    model: &M,
    inspection: &Inspection,
    target: SaliencyTarget,
) -> Result<SaliencyMap> {
    match target {
        SaliencyTarget::Class(c) if c.0 >= model.num_classes() => {
            return Err(TideError::InvalidLabel {
                label: c.0,
                count: model.num_classes(),
            })
        }
        SaliencyTarget::Concept(k) if k.0 >= model.num_concepts() => {
            return Err(TideError::InvalidLabel {
                label: k.0,
                count: model.num_concepts(),
            })
        }
        _ => {}
    }
    let gradient = model.target_gradient(inspection, target)?;
    gradcam_from_gradient(&inspection.features, &gradient, target)
}

/// GradCAM at feature-grid resolution for a class or concept logit.
/// An all-zero gradient yields an all-zero (degenerate) map.
pub fn gradcam<M: ConceptModel + ?Sized>(
    model: &M,
    image: &Image,
    target: SaliencyTarget,
) -> Result<SaliencyMap> {
    let inspection = model.inspect(image)?;
    gradcam_inspected(model, &inspection, target)
}

/// Fraction of a concept's ground-truth region covered by the saliency map:
/// `sum min(S, G) / sum G`.
pub fn overlap(saliency: &SaliencyMap, mask: &ConceptMask) -> Result<f64> {
    if (saliency.height, saliency.width) != (mask.height, mask.width) {
        return Err(TideError::InvalidInput(format!(
            "saliency {}x{} vs mask {}x{}",
            saliency.height, saliency.width, mask.height, mask.width
        )));
    }
    let area = mask.count();
    if area == 0 {
        return Err(TideError::UndefinedOverlap);
    }
    let covered: f64 = saliency
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&s, &g)| s.min(g as f64))
        .sum();
    Ok(covered / area as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept_id: ConceptId,
    pub mean_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConcepts {
    pub class_id: ClassId,
    pub important: Vec<ConceptId>,
    /// Mean overlap of every candidate concept, accepted or not.
    pub scores: Vec<ConceptScore>,
    /// Set when no concept cleared the threshold and the top-scoring one was kept.
    pub fallback: bool,
}

/// Important concepts per class, with the threshold and scores that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportantConceptTable {
    pub tau: f64,
    pub classes: Vec<ClassConcepts>,
    pub warnings: Vec<String>,
}

impl ImportantConceptTable {
    pub fn important(&self, class: ClassId) -> &[ConceptId] {
        self.classes
            .get(class.0)
            .map_or(&[][..], |c| c.important.as_slice())
    }

    /// Union of important concepts across classes, sorted.
    pub fn all_important(&self) -> Vec<ConceptId> {
        let mut all: Vec<ConceptId> = self
            .classes
            .iter()
            .flat_map(|c| c.important.iter().copied())
            .collect();
        all.sort();
        all.dedup();
        all
    }

    pub fn mean_overlap(&self, class: ClassId, concept: ConceptId) -> Option<f64> {
        self.classes.get(class.0).and_then(|c| {
            c.scores
                .iter()
                .find(|s| s.concept_id == concept)
                .map(|s| s.mean_overlap)
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TideError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Select, per class, the concepts whose mean class-saliency overlap exceeds `tau`.
///
/// Samples lacking a concept contribute zero overlap for it. A class whose set
/// would be empty keeps its single best concept and a warning is recorded.
pub fn discover_concepts<M: ConceptModel + Sync + ?Sized>(
    model: &M,
    samples: &[Sample],
    num_classes: usize,
    tau: f64,
) -> Result<ImportantConceptTable> {
    if !tau.is_finite() {
        return Err(TideError::InvalidConfig("tau must be finite".into()));
    }
    let per_sample: Vec<(ClassId, Vec<(ConceptId, f64)>)> = samples
        .par_iter()
        .map(|sample| {
            let image = sample.image.to_image();
            let map = gradcam(model, &image, SaliencyTarget::Class(sample.class_id))?;
            let mut scores = Vec::with_capacity(sample.masks.len());
            for mask in &sample.masks {
                if mask.is_empty() {
                    continue;
                }
                scores.push((mask.concept_id, overlap(&map, mask)?));
            }
            Ok((sample.class_id, scores))
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![0usize; num_classes];
    let mut gathered: Vec<BTreeMap<ConceptId, Vec<f64>>> = vec![BTreeMap::new(); num_classes];
    for (class, scores) in per_sample {
        if class.0 >= num_classes {
            return Err(TideError::InvalidLabel {
                label: class.0,
                count: num_classes,
            });
        }
        counts[class.0] += 1;
        for (k, o) in scores {
            gathered[class.0].entry(k).or_default().push(o);
        }
    }

    let mut classes = Vec::with_capacity(num_classes);
    let mut warnings = Vec::new();
    for (c, mut by_concept) in gathered.into_iter().enumerate() {
        if counts[c] == 0 {
            return Err(TideError::EmptyClass(c));
        }
        let n = counts[c] as f64;
        let scores: Vec<ConceptScore> = by_concept
            .iter_mut()
            .map(|(&k, values)| {
                // sorted summation keeps the result independent of sample order
                values.sort_by(f64::total_cmp);
                ConceptScore {
                    concept_id: k,
                    mean_overlap: values.iter().sum::<f64>() / n,
                }
            })
            .collect();
        let mut important: Vec<ConceptId> = scores
            .iter()
            .filter(|s| s.mean_overlap > tau)
            .map(|s| s.concept_id)
            .collect();
        let mut fallback = false;
        if important.is_empty() {
            if let Some(best) = scores
                .iter()
                .reduce(|a, b| if b.mean_overlap > a.mean_overlap { b } else { a })
            {
                warnings.push(format!(
                    "class {c}: no concept above tau={tau}; keeping {} (mean overlap {:.4})",
                    best.concept_id, best.mean_overlap
                ));
                important.push(best.concept_id);
                fallback = true;
            } else {
                warnings.push(format!("class {c}: no annotated concepts"));
            }
        }
        classes.push(ClassConcepts {
            class_id: ClassId(c),
            important,
            scores,
            fallback,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ImportantConceptTable {
        tau,
        classes,
        warnings,
    })
}
