//! The combined training objective over a batch and its analytic gradient.
//!
//! The saliency-alignment term differentiates through GradCAM: the concept map
//! is built from the gradient of the concept logit with respect to the feature
//! volume, and that gradient is itself a function of the concept-head weights.
//! Backpropagating through the map therefore reaches both the backbone (via the
//! feature volume) and the concept head (via the GradCAM channel weights).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{class_loss_grad, concept_loss_grad, lcc_loss_grad, pool_weighted};
use crate::error::{Result, TideError};
use crate::nn::{Forward, Head, TideModel};
use crate::primitives::{ConceptId, ConceptMask, Image, SaliencyTarget};
use crate::saliency::{gradcam_raw, gradcam_weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub concept: f64,
    pub csa: f64,
    pub lcc: f64,
    /// Triplet margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 1.0,
            concept: 1.0,
            csa: 1.0,
            lcc: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.class, self.concept, self.csa, self.lcc];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TideError::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(TideError::InvalidConfig("at least one loss weight must be positive".into()));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(TideError::InvalidConfig("margin must be > 0".into()));
        }
        Ok(())
    }

    /// Class cross-entropy only.
    pub fn erm() -> Self {
        LossWeights {
            class: 1.0,
            concept: 0.0,
            csa: 0.0,
            lcc: 0.0,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub concept: f64,
    pub csa: f64,
    pub lcc: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.class, self.concept, self.csa, self.lcc]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Triplet attached to a batch item; the negative is another item of the batch.
#[derive(Debug, Clone)]
pub struct TripletRef {
    pub concept: ConceptId,
    pub positive: Image,
    pub negative: usize,
    pub negative_concept: ConceptId,
}

/// One anchor sample prepared for the objective.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: Image,
    pub class: usize,
    /// Binary presence over the concept vocabulary.
    pub concept_present: Vec<bool>,
    /// Masks for every present concept.
    pub masks: Vec<ConceptMask>,
    /// Concepts whose saliency is aligned: important for the class and present.
    pub csa_concepts: Vec<ConceptId>,
    pub triplet: Option<TripletRef>,
}

impl BatchItem {
    fn mask(&self, k: ConceptId) -> Result<&ConceptMask> {
        self.masks
            .iter()
            .find(|m| m.concept_id == k)
            .ok_or_else(|| TideError::InvalidInput(format!("missing mask for {k}")))
    }
}

/// Per-concept alignment loss `||S - G||^2` and, if requested, its gradients with
/// respect to the feature volume and the concept-head row.
struct CsaTerm {
    loss: f64,
    d_features: Vec<f64>,
    d_head_row: Vec<f64>,
}

fn csa_term(model: &TideModel, fwd: &Forward, k: ConceptId, mask: &ConceptMask, scale: Option<f64>) -> Result<CsaTerm> {
    let f = &fwd.features;
    // GradCAM channel weights: spatial mean of d(score_k)/dF
    let logit_grad = model.logit_feature_gradient(SaliencyTarget::Concept(k))?;
    let alpha = gradcam_weights(&logit_grad);
    let cells = f.cells();
    let pre: Vec<f64> = f
        .data
        .chunks_exact(f.channels)
        .map(|cell| cell.iter().zip(&alpha).map(|(a, b)| a * b).sum())
        .collect();
    let relu = gradcam_raw(f, &alpha).data;
    let (mut lo, mut hi) = (0usize, 0usize);
    for (i, &v) in relu.iter().enumerate() {
        if v < relu[lo] {
            lo = i;
        }
        if v > relu[hi] {
            hi = i;
        }
    }
    let range = relu[hi] - relu[lo];
    let s: Vec<f64> = if range > 0.0 {
        relu.iter().map(|v| (v - relu[lo]) / range).collect()
    } else {
        vec![0.0; cells]
    };
    let loss: f64 = s
        .iter()
        .zip(&mask.data)
        .map(|(a, &g)| (a - g as f64).powi(2))
        .sum();
    let mut term = CsaTerm {
        loss,
        d_features: Vec::new(),
        d_head_row: Vec::new(),
    };
    let Some(scale) = scale else {
        return Ok(term);
    };
    term.d_features = vec![0.0; f.data.len()];
    term.d_head_row = vec![0.0; f.channels];
    if range <= 0.0 {
        // the normalized map is locally constant
        return Ok(term);
    }
    let gs: Vec<f64> = s
        .iter()
        .zip(&mask.data)
        .map(|(a, &g)| 2.0 * (a - g as f64) * scale)
        .collect();
    let u: f64 = gs.iter().sum();
    let v: f64 = gs.iter().zip(&s).map(|(g, s)| g * s).sum();
    let mut d_relu: Vec<f64> = gs.iter().map(|g| g / range).collect();
    d_relu[lo] += (v - u) / range;
    d_relu[hi] -= v / range;
    let d_pre: Vec<f64> = d_relu
        .iter()
        .zip(&pre)
        .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
        .collect();
    let mut d_alpha = vec![0.0; f.channels];
    for (p, &dp) in d_pre.iter().enumerate() {
        if dp == 0.0 {
            continue;
        }
        let cell = f.cell_at(p);
        let out = &mut term.d_features[p * f.channels..(p + 1) * f.channels];
        for l in 0..f.channels {
            out[l] += dp * alpha[l];
            d_alpha[l] += dp * cell[l];
        }
    }
    // alpha_l = mean_p dScore/dF(p, l) = w_kl / cells, so dalpha_l/dw_kl = 1 / cells
    for l in 0..f.channels {
        term.d_head_row[l] = d_alpha[l] / cells as f64;
    }
    Ok(term)
}

/// Evaluate the batch-mean objective and optionally its gradient with respect to
/// every model parameter.
pub fn evaluate_objective(
    model: &TideModel,
    batch: &[BatchItem],
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(TideError::InvalidInput("empty batch".into()));
    }
    let use_lcc = weights.lcc > 0.0;
    let anchors: Vec<Forward> = batch
        .par_iter()
        .map(|item| model.forward(&item.image))
        .collect::<Result<_>>()?;
    let positives: Vec<Option<Forward>> = batch
        .par_iter()
        .map(|item| match (&item.triplet, use_lcc) {
            (Some(t), true) => model.forward(&t.positive).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let c = model.feature_channels();
    let (gh, gw) = model.grid();
    let cells = (gh * gw) as f64;
    let mut sums = LossBreakdown::default();
    let mut grad = if with_grad { vec![0.0; model.num_params()] } else { Vec::new() };
    let mut d_anchor: Vec<Vec<f64>> = if with_grad {
        anchors.iter().map(|f| vec![0.0; f.features.data.len()]).collect()
    } else {
        Vec::new()
    };
    let mut d_positive: Vec<Option<Vec<f64>>> = positives
        .iter()
        .map(|p| p.as_ref().filter(|_| with_grad).map(|f| vec![0.0; f.features.data.len()]))
        .collect();

    let class_w = model.head_weight_range(Head::Class);
    let class_b = model.head_bias_range(Head::Class);
    let concept_w = model.head_weight_range(Head::Concept);
    let concept_b = model.head_bias_range(Head::Concept);

    for (i, item) in batch.iter().enumerate() {
        let fwd = &anchors[i];
        let mut d_pooled = vec![0.0; c];

        let (lc, d_logits) = class_loss_grad(&fwd.class_logits, item.class)?;
        sums.class += lc;
        let (lk, d_scores) = concept_loss_grad(&fwd.concept_scores, &item.concept_present)?;
        sums.concept += lk;

        if with_grad {
            for (head, wr, br, d_out, weight) in [
                (Head::Class, &class_w, &class_b, &d_logits, weights.class),
                (Head::Concept, &concept_w, &concept_b, &d_scores, weights.concept),
            ] {
                if weight == 0.0 {
                    continue;
                }
                let scale = weight / n;
                for (o, &d) in d_out.iter().enumerate() {
                    let d = d * scale;
                    grad[br.start + o] += d;
                    let row = model.head_row(head, o);
                    for l in 0..c {
                        grad[wr.start + o * c + l] += d * fwd.pooled[l];
                        d_pooled[l] += d * row[l];
                    }
                }
            }
        }

        if !item.csa_concepts.is_empty() {
            let per = 1.0 / item.csa_concepts.len() as f64;
            let scale = (with_grad && weights.csa > 0.0).then_some(weights.csa * per / n);
            let mut lcsa = 0.0;
            for &k in &item.csa_concepts {
                let term = csa_term(model, fwd, k, item.mask(k)?, scale)?;
                lcsa += term.loss;
                if scale.is_some() {
                    for (d, t) in d_anchor[i].iter_mut().zip(&term.d_features) {
                        *d += t;
                    }
                    let row = concept_w.start + k.0 * c;
                    for l in 0..c {
                        grad[row + l] += term.d_head_row[l];
                    }
                }
            }
            sums.csa += lcsa * per;
        }

        if let (Some(t), Some(pos)) = (&item.triplet, positives[i].as_ref()) {
            let neg_item = batch
                .get(t.negative)
                .ok_or_else(|| TideError::InvalidInput("triplet negative out of batch".into()))?;
            let g_anchor = item.mask(t.concept)?.as_weights();
            let g_negative = neg_item.mask(t.negative_concept)?.as_weights();
            let fa = pool_weighted(&fwd.features, &g_anchor)?;
            let fp = pool_weighted(&pos.features, &g_anchor)?;
            let fneg = pool_weighted(&anchors[t.negative].features, &g_negative)?;
            let tg = lcc_loss_grad(&fa, &fp, &fneg, weights.margin)?;
            sums.lcc += tg.loss;
            if with_grad && tg.loss > 0.0 {
                let scale = weights.lcc / n;
                let spread = |dst: &mut [f64], mask: &[f64], df: &[f64]| {
                    for (p, &m) in mask.iter().enumerate() {
                        if m == 0.0 {
                            continue;
                        }
                        for l in 0..c {
                            dst[p * c + l] += scale * m * df[l];
                        }
                    }
                };
                spread(&mut d_anchor[i], &g_anchor, &tg.anchor);
                if let Some(dp) = d_positive[i].as_mut() {
                    spread(dp, &g_anchor, &tg.positive);
                }
                spread(&mut d_anchor[t.negative], &g_negative, &tg.negative);
            }
        }

        if with_grad {
            // global average pooling
            for p in 0..(gh * gw) {
                for l in 0..c {
                    d_anchor[i][p * c + l] += d_pooled[l] / cells;
                }
            }
        }
    }

    let mean = LossBreakdown {
        class: sums.class / n,
        concept: sums.concept / n,
        csa: sums.csa / n,
        lcc: sums.lcc / n,
        total: 0.0,
    };
    let breakdown = LossBreakdown {
        total: weights.class * mean.class
            + weights.concept * mean.concept
            + weights.csa * mean.csa
            + weights.lcc * mean.lcc,
        ..mean
    };
    if !with_grad {
        return Ok((breakdown, None));
    }

    let mut jobs: Vec<(&Forward, &Vec<f64>)> = anchors.iter().zip(d_anchor.iter()).collect();
    for (p, d) in positives.iter().zip(d_positive.iter()) {
        if let (Some(p), Some(d)) = (p, d) {
            jobs.push((p, d));
        }
    }
    let partials: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|(fwd, d)| {
            let mut g = vec![0.0; model.num_params()];
            model.backward_features(fwd, d, &mut g);
            g
        })
        .collect();
    // fixed-order reduction keeps the update bitwise reproducible
    for g in partials {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((breakdown, Some(grad)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::{BlockSpec, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec() -> ModelSpec {
        ModelSpec {
            image_height: 8,
            image_width: 8,
            input_channels: 3,
            blocks: vec![
                BlockSpec { channels: 3, pool: true },
                BlockSpec { channels: 4, pool: false },
            ],
            num_classes: 2,
            num_concepts: 3,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng) -> Image {
        Image::new(8, 8, 3, (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, k: usize) -> ConceptMask {
        let mut data: Vec<u8> = (0..16).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        data[rng.gen_range(0..16)] = 1;
        ConceptMask::new(ConceptId(k), 4, 4, data).unwrap()
    }

    /// Three anchors; item 0 and 1 each carry a triplet whose negative is another item.
    pub(crate) fn tiny_batch(seed: u64) -> Vec<BatchItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let concept_sets = [vec![0usize, 1], vec![2], vec![1, 2]];
        let mut items: Vec<BatchItem> = concept_sets
            .iter()
            .enumerate()
            .map(|(i, ks)| BatchItem {
                image: random_image(&mut rng),
                class: i % 2,
                concept_present: (0..3).map(|k| ks.contains(&k)).collect(),
                masks: ks.iter().map(|&k| random_mask(&mut rng, k)).collect(),
                csa_concepts: ks.iter().map(|&k| ConceptId(k)).collect(),
                triplet: None,
            })
            .collect();
        items[0].triplet = Some(TripletRef {
            concept: ConceptId(0),
            positive: random_image(&mut rng),
            negative: 1,
            negative_concept: ConceptId(2),
        });
        items[1].triplet = Some(TripletRef {
            concept: ConceptId(2),
            positive: random_image(&mut rng),
            negative: 0,
            negative_concept: ConceptId(1),
        });
        items
    }

    /// Largest relative error between the analytic and central-difference gradient.
    pub(crate) fn max_gradient_error(model: &TideModel, batch: &[BatchItem], weights: &LossWeights) -> f64 {
        let (_, grad) = evaluate_objective(model, batch, weights, true).unwrap();
        let grad = grad.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..model.num_params() {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let lp = evaluate_objective(&plus, batch, weights, false).unwrap().0.total;
            let lm = evaluate_objective(&minus, batch, weights, false).unwrap().0.total;
            let numeric = (lp - lm) / (2.0 * h);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    fn weights(class: f64, concept: f64, csa: f64, lcc: f64) -> LossWeights {
        LossWeights {
            class,
            concept,
            csa,
            lcc,
            margin: 1.0,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = TideModel::new(tiny_spec(), 11).unwrap();
        let batch = tiny_batch(5);
        for w in [
            weights(1.0, 1.0, 1.0, 1.0),
            weights(0.0, 0.0, 1.0, 0.0),
            weights(0.0, 0.0, 0.0, 1.0),
        ] {
            let err = max_gradient_error(&model, &batch, &w);
            assert!(err < 1e-4, "{w:?}: relative error {err}");
        }
    }

    #[test]
    fn csa_term_matches_direct_evaluation() {
        let model = TideModel::new(tiny_spec(), 2).unwrap();
        let batch = tiny_batch(9);
        let (loss, _) = evaluate_objective(&model, &batch, &weights(0.0, 0.0, 1.0, 0.0), false).unwrap();
        let mut expected = 0.0;
        for item in &batch {
            let fwd = model.forward(&item.image).unwrap();
            let mut pairs = Vec::new();
            let mut maps = Vec::new();
            for &k in &item.csa_concepts {
                let g = model.logit_feature_gradient(SaliencyTarget::Concept(k)).unwrap();
                maps.push(crate::saliency::gradcam_from_gradient(&fwd.features, &g, SaliencyTarget::Concept(k)).unwrap());
            }
            for (s, &k) in maps.iter().zip(&item.csa_concepts) {
                pairs.push((s, item.mask(k).unwrap()));
            }
            expected += crate::training::losses::csa_loss(&pairs).unwrap();
        }
        expected /= batch.len() as f64;
        assert!((loss.csa - expected).abs() < 1e-12);
        assert_eq!(loss.total, loss.csa);
    }

    #[test]
    fn erm_total_is_class_loss() {
        let model = TideModel::new(tiny_spec(), 3).unwrap();
        let (loss, _) = evaluate_objective(&model, &tiny_batch(1), &LossWeights::erm(), false).unwrap();
        assert_eq!(loss.total, loss.class);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(weights(0.0, 0.0, 0.0, 0.0).validate().is_err());
        assert!(weights(-1.0, 1.0, 1.0, 1.0).validate().is_err());
        assert!(LossWeights { margin: 0.0, ..LossWeights::default() }.validate().is_err());
    }
}
