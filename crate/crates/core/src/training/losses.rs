//! The four loss terms, each with its value and analytic gradient.

use crate::error::{Result, TideError};
use crate::primitives::{ConceptMask, ConceptVector, FeatureVolume, SaliencyMap};

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of `logits` against class `label`.
pub fn class_loss(logits: &[f64], label: usize) -> Result<f64> {
    class_loss_grad(logits, label).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn class_loss_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(TideError::InvalidLabel {
            label,
            count: logits.len(),
        });
    }
    let lse = log_sum_exp(logits);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (z - lse).exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - logits[label], grad))
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of independent sigmoid concept scores.
pub fn concept_loss(scores: &[f64], present: &[bool]) -> Result<f64> {
    concept_loss_grad(scores, present).map(|(l, _)| l)
}

pub fn concept_loss_grad(scores: &[f64], present: &[bool]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != present.len() || scores.is_empty() {
        return Err(TideError::InvalidInput(format!(
            "{} concept scores vs {} labels",
            scores.len(),
            present.len()
        )));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(present) {
        // -[y log sig(s) + (1-y) log(1 - sig(s))] = softplus(-s) if y else softplus(s)
        loss += if y { softplus(-s) } else { softplus(s) };
        grad.push((sigmoid(s) - if y { 1.0 } else { 0.0 }) / n);
    }
    Ok((loss / n, grad))
}

/// Mean over concepts of the squared L2 distance between saliency and mask.
/// `pairs` must already be restricted to the important concepts; empty gives 0.
pub fn csa_loss(pairs: &[(&SaliencyMap, &ConceptMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, g) in pairs {
        if (s.height, s.width) != (g.height, g.width) {
            return Err(TideError::InvalidInput("saliency/mask shape mismatch".into()));
        }
        total += s
            .data
            .iter()
            .zip(&g.data)
            .map(|(&a, &b)| (a - b as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / pairs.len() as f64)
}

/// Weighted spatial sum `sum_{i,j} w(i,j) F(i,j,:)`.
pub fn pool_weighted(features: &FeatureVolume, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != features.cells() {
        return Err(TideError::InvalidInput(format!(
            "{} pooling weights for {} cells",
            weights.len(),
            features.cells()
        )));
    }
    let mut out = vec![0.0; features.channels];
    for (cell, &w) in features.data.chunks_exact(features.channels).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(cell) {
            *o += w * f;
        }
    }
    Ok(out)
}

/// Mask-weighted feature sum for one concept (a sum, not a mean).
pub fn concept_feature(
    features: &FeatureVolume,
    mask: &ConceptMask,
    source_sample_id: &str,
) -> Result<ConceptVector> {
    if (features.height, features.width) != (mask.height, mask.width) {
        return Err(TideError::InvalidInput(format!(
            "features {}x{} vs mask {}x{}",
            features.height, features.width, mask.height, mask.width
        )));
    }
    Ok(ConceptVector {
        concept_id: mask.concept_id,
        source_sample_id: source_sample_id.to_string(),
        data: pool_weighted(features, &mask.as_weights())?,
    })
}

/// Triplet margin loss `max(0, d(a, p) - d(a, n) + margin)` with Euclidean `d`.
pub fn lcc_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    lcc_loss_grad(anchor, positive, negative, margin).map(|g| g.loss)
}

#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub loss: f64,
    pub d_positive_distance: f64,
    pub d_negative_distance: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn lcc_loss_grad(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletGrad> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(TideError::InvalidInput("triplet vectors differ in length".into()));
    }
    let dp = crate::primitives::euclidean_distance(anchor, positive)?;
    let dn = crate::primitives::euclidean_distance(anchor, negative)?;
    let raw = dp - dn + margin;
    let c = anchor.len();
    let mut g = TripletGrad {
        loss: raw.max(0.0),
        d_positive_distance: dp,
        d_negative_distance: dn,
        anchor: vec![0.0; c],
        positive: vec![0.0; c],
        negative: vec![0.0; c],
    };
    if raw <= 0.0 {
        return Ok(g);
    }
    // d||x||/dx = x/||x||, taking 0 as the subgradient at the origin
    for l in 0..c {
        let up = if dp > 0.0 { (anchor[l] - positive[l]) / dp } else { 0.0 };
        let un = if dn > 0.0 { (anchor[l] - negative[l]) / dn } else { 0.0 };
        g.anchor[l] = up - un;
        g.positive[l] = -up;
        g.negative[l] = un;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{ConceptId, SaliencyTarget};
    use proptest::prelude::*;

    #[test]
    fn class_loss_uniform_is_ln_k() {
        for k in [2usize, 5, 10] {
            let l = class_loss(&vec![0.3; k], 1).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn class_loss_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for m in [1.0, 5.0, 20.0, 100.0] {
            let l = class_loss(&[m, 0.0, 0.0], 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn class_loss_label_range() {
        assert!(matches!(
            class_loss(&[0.0, 1.0], 2),
            Err(TideError::InvalidLabel { label: 2, count: 2 })
        ));
    }

    #[test]
    fn concept_loss_limits() {
        assert!((concept_loss(&[0.0; 4], &[true, false, true, false]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = concept_loss(&[800.0, -800.0], &[true, false]).unwrap();
        assert_eq!(l, 0.0);
        let inf = concept_loss(&[f64::INFINITY, f64::NEG_INFINITY], &[true, false]).unwrap();
        assert_eq!(inf, 0.0);
        assert!(concept_loss(&[0.0], &[true, false]).is_err());
    }

    fn smap(data: Vec<f64>, w: usize) -> SaliencyMap {
        SaliencyMap {
            target: SaliencyTarget::Concept(ConceptId(0)),
            height: data.len() / w,
            width: w,
            data,
        }
    }

    fn mask(data: Vec<u8>, w: usize) -> ConceptMask {
        ConceptMask::new(ConceptId(0), data.len() / w, w, data).unwrap()
    }

    #[test]
    fn csa_examples() {
        let g = mask(vec![1, 0, 0, 1], 2);
        let s = smap(vec![1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(csa_loss(&[(&s, &g)]).unwrap(), 0.0);
        let s1 = smap(vec![1.0, 0.0], 2);
        let g1 = mask(vec![0, 0], 2);
        assert_eq!(csa_loss(&[(&s1, &g1)]).unwrap(), 1.0);
        // squared norms 2 and 4 -> mean 3
        let sa = smap(vec![1.0, 1.0, 0.0, 0.0], 4);
        let ga = mask(vec![0, 0, 0, 0], 4);
        let sb = smap(vec![1.0, 1.0, 1.0, 1.0], 4);
        let gb = mask(vec![0, 0, 0, 0], 4);
        assert_eq!(csa_loss(&[(&sa, &ga), (&sb, &gb)]).unwrap(), 3.0);
        assert_eq!(csa_loss(&[]).unwrap(), 0.0);
    }

    #[test]
    fn concept_feature_examples() {
        // channel 0 = [[2,3],[4,5]], channel 1 = 1s
        let f = FeatureVolume::new(2, 2, 2, vec![2.0, 1.0, 3.0, 1.0, 4.0, 1.0, 5.0, 1.0]).unwrap();
        let v = concept_feature(&f, &mask(vec![1, 0, 0, 0], 2), "s").unwrap();
        assert_eq!(v.data, vec![2.0, 1.0]);
        let zero = concept_feature(&f, &mask(vec![0; 4], 2), "s").unwrap();
        assert_eq!(zero.data, vec![0.0, 0.0]);
        let all = concept_feature(&f, &mask(vec![1; 4], 2), "s").unwrap();
        assert_eq!(all.data, vec![14.0, 4.0]);
        assert!(concept_feature(&f, &mask(vec![1; 6], 3), "s").is_err());
    }

    #[test]
    fn lcc_examples() {
        assert_eq!(lcc_loss(&[0.0, 0.0], &[3.0, 4.0], &[1.0, 0.0], 1.0).unwrap(), 5.0);
        assert_eq!(lcc_loss(&[1.0, 1.0], &[1.0, 1.0], &[3.0, 1.0], 1.0).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn lcc_nonnegative_and_zero_means_margin_met(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            p in prop::collection::vec(-3.0f64..3.0, 4),
            n in prop::collection::vec(-3.0f64..3.0, 4),
            alpha in 0.1f64..2.0,
        ) {
            let g = lcc_loss_grad(&a, &p, &n, alpha).unwrap();
            prop_assert!(g.loss >= 0.0);
            if g.loss == 0.0 {
                prop_assert!(g.d_positive_distance + alpha <= g.d_negative_distance + 1e-12);
            }
        }

        #[test]
        fn csa_invariant_to_concept_order(
            s in prop::collection::vec(0.0f64..1.0, 3 * 9),
            g in prop::collection::vec(0u8..2, 3 * 9),
        ) {
            let maps: Vec<SaliencyMap> = s.chunks(9).map(|c| smap(c.to_vec(), 3)).collect();
            let masks: Vec<ConceptMask> = g.chunks(9).map(|c| mask(c.to_vec(), 3)).collect();
            let fwd: Vec<_> = maps.iter().zip(&masks).collect();
            let rev: Vec<_> = maps.iter().zip(&masks).rev().collect();
            let a = csa_loss(&fwd).unwrap();
            let b = csa_loss(&rev).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn concept_feature_is_linear(
            f1 in prop::collection::vec(-5.0f64..5.0, 9 * 2),
            f2 in prop::collection::vec(-5.0f64..5.0, 9 * 2),
            g in prop::collection::vec(0u8..2, 9),
        ) {
            let m = mask(g, 3);
            let a = FeatureVolume::new(3, 3, 2, f1.clone()).unwrap();
            let b = FeatureVolume::new(3, 3, 2, f2.clone()).unwrap();
            let sum = FeatureVolume::new(3, 3, 2, f1.iter().zip(&f2).map(|(x, y)| x + y).collect()).unwrap();
            let fa = concept_feature(&a, &m, "a").unwrap().data;
            let fb = concept_feature(&b, &m, "b").unwrap().data;
            let fs = concept_feature(&sum, &m, "s").unwrap().data;
            for l in 0..2 {
                prop_assert!((fs[l] - fa[l] - fb[l]).abs() < 1e-9);
            }
        }
    }
}
