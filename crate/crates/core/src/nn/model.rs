use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{block_backward, block_forward, Act, BlockCache};
use crate::error::{Result, TideError};
use crate::primitives::{FeatureVolume, Image, SaliencyTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub pool: bool,
}

/// Architecture of the shared backbone and its two linear heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub num_concepts: usize,
}

impl ModelSpec {
    /// Four conv blocks taking a 28x28 RGB input to a 7x7x64 feature grid.
    pub fn desk_default(num_classes: usize, num_concepts: usize) -> Self {
        ModelSpec {
            image_height: 28,
            image_width: 28,
            input_channels: 3,
            blocks: vec![
                BlockSpec { channels: 16, pool: true },
                BlockSpec { channels: 32, pool: true },
                BlockSpec { channels: 64, pool: false },
                BlockSpec { channels: 64, pool: false },
            ],
            num_classes,
            num_concepts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(TideError::InvalidConfig("backbone needs at least one block".into()));
        }
        if self.num_classes < 2 || self.num_concepts < 1 {
            return Err(TideError::InvalidConfig(
                "model needs >= 2 classes and >= 1 concept".into(),
            ));
        }
        if self.input_channels == 0 || self.blocks.iter().any(|b| b.channels == 0) {
            return Err(TideError::InvalidConfig("zero-width layer".into()));
        }
        let pools = self.blocks.iter().filter(|b| b.pool).count() as u32;
        let div = 1usize << pools;
        if !self.image_height.is_multiple_of(div) || !self.image_width.is_multiple_of(div) || self.image_height < div {
            return Err(TideError::InvalidConfig(format!(
                "image {}x{} is not divisible by the backbone stride {div}",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    /// Feature-grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        let pools = self.blocks.iter().filter(|b| b.pool).count() as u32;
        (self.image_height >> pools, self.image_width >> pools)
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }
}

#[derive(Debug, Clone)]
struct ConvSlot {
    weight: Range<usize>,
    bias: Range<usize>,
    cout: usize,
    pool: bool,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvSlot>,
    class_weight: Range<usize>,
    class_bias: Range<usize>,
    concept_weight: Range<usize>,
    concept_bias: Range<usize>,
    total: usize,
}

impl Layout {
    fn of(spec: &ModelSpec) -> Layout {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut convs = Vec::with_capacity(spec.blocks.len());
        let mut cin = spec.input_channels;
        for b in &spec.blocks {
            convs.push(ConvSlot {
                weight: take(9 * cin * b.channels),
                bias: take(b.channels),
                cout: b.channels,
                pool: b.pool,
            });
            cin = b.channels;
        }
        let c = spec.feature_channels();
        let class_weight = take(spec.num_classes * c);
        let class_bias = take(spec.num_classes);
        let concept_weight = take(spec.num_concepts * c);
        let concept_bias = take(spec.num_concepts);
        Layout {
            convs,
            class_weight,
            class_bias,
            concept_weight,
            concept_bias,
            total: at,
        }
    }
}

/// Which linear head a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Class,
    Concept,
}

/// Result of a forward pass, holding what backward needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: FeatureVolume,
    pub pooled: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub concept_scores: Vec<f64>,
    caches: Vec<BlockCache>,
}

/// Shared convolutional backbone, global average pooling, and class and concept heads.
///
/// All parameters live in one flat vector so optimizers and gradient checks can
/// treat the model as a point in `R^n`.
#[derive(Debug, Clone)]
pub struct TideModel {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<f64>,
}

impl TideModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::of(&spec);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = spec.input_channels;
        for slot in &layout.convs {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[slot.weight.clone()] {
                *p = normal.sample(&mut rng);
            }
            cin = slot.cout;
        }
        let c = spec.feature_channels();
        let normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("positive std");
        for r in [layout.class_weight.clone(), layout.concept_weight.clone()] {
            for p in &mut params[r] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(TideModel {
            spec,
            layout,
            params,
        })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::of(&spec);
        if params.len() != layout.total {
            return Err(TideError::InvalidInput(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(TideError::InvalidInput("non-finite parameter".into()));
        }
        Ok(TideModel {
            spec,
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn grid(&self) -> (usize, usize) {
        self.spec.grid()
    }

    pub fn feature_channels(&self) -> usize {
        self.spec.feature_channels()
    }

    pub fn head_weight(&self, head: Head) -> &[f64] {
        &self.params[self.head_weight_range(head)]
    }

    pub fn head_bias(&self, head: Head) -> &[f64] {
        &self.params[self.head_bias_range(head)]
    }

    pub fn head_weight_range(&self, head: Head) -> Range<usize> {
        match head {
            Head::Class => self.layout.class_weight.clone(),
            Head::Concept => self.layout.concept_weight.clone(),
        }
    }

    pub fn head_bias_range(&self, head: Head) -> Range<usize> {
        match head {
            Head::Class => self.layout.class_bias.clone(),
            Head::Concept => self.layout.concept_bias.clone(),
        }
    }

    /// One row of a head's weight matrix.
    pub fn head_row(&self, head: Head, row: usize) -> &[f64] {
        let c = self.feature_channels();
        &self.head_weight(head)[row * c..(row + 1) * c]
    }

    pub fn forward(&self, image: &Image) -> Result<Forward> {
        if image.height != self.spec.image_height
            || image.width != self.spec.image_width
            || image.channels != self.spec.input_channels
        {
            return Err(TideError::InvalidInput(format!(
                "model expects {}x{}x{} input, got {}x{}x{}",
                self.spec.image_height,
                self.spec.image_width,
                self.spec.input_channels,
                image.height,
                image.width,
                image.channels
            )));
        }
        let mut act = Act {
            h: image.height,
            w: image.width,
            c: image.channels,
            data: image.data.clone(),
        };
        let mut caches = Vec::with_capacity(self.layout.convs.len());
        for slot in &self.layout.convs {
            let (next, cache) = block_forward(
                &act,
                &self.params[slot.weight.clone()],
                &self.params[slot.bias.clone()],
                slot.cout,
                slot.pool,
            );
            caches.push(cache);
            act = next;
        }
        let cells = (act.h * act.w) as f64;
        let mut pooled = vec![0.0; act.c];
        for cell in act.data.chunks_exact(act.c) {
            for (p, &v) in pooled.iter_mut().zip(cell) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= cells;
        }
        let class_logits = self.linear(Head::Class, &pooled);
        let concept_scores = self.linear(Head::Concept, &pooled);
        if class_logits.iter().chain(&concept_scores).any(|v| !v.is_finite()) {
            return Err(TideError::InvalidInput("non-finite forward output".into()));
        }
        Ok(Forward {
            features: FeatureVolume {
                height: act.h,
                width: act.w,
                channels: act.c,
                data: act.data,
            },
            pooled,
            class_logits,
            concept_scores,
            caches,
        })
    }

    fn linear(&self, head: Head, x: &[f64]) -> Vec<f64> {
        let c = x.len();
        let w = self.head_weight(head);
        self.head_bias(head)
            .iter()
            .enumerate()
            .map(|(o, &b)| b + w[o * c..(o + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Gradient of a class or concept logit with respect to the feature volume.
    ///
    /// Under global average pooling every cell receives `w_row / (H * W)`; the
    /// result is independent of the input, which is what lets training
    /// differentiate GradCAM maps with respect to the head weights.
    pub fn logit_feature_gradient(&self, target: SaliencyTarget) -> Result<FeatureVolume> {
        let (head, row, count) = match target {
            SaliencyTarget::Class(c) => (Head::Class, c.0, self.spec.num_classes),
            SaliencyTarget::Concept(k) => (Head::Concept, k.0, self.spec.num_concepts),
        };
        if row >= count {
            return Err(TideError::InvalidLabel { label: row, count });
        }
        let (gh, gw) = self.grid();
        let cells = (gh * gw) as f64;
        let w = self.head_row(head, row);
        let mut data = Vec::with_capacity(gh * gw * w.len());
        for _ in 0..gh * gw {
            data.extend(w.iter().map(|v| v / cells));
        }
        Ok(FeatureVolume {
            height: gh,
            width: gw,
            channels: w.len(),
            data,
        })
    }

    /// Backpropagate a feature-volume gradient through the backbone, accumulating
    /// parameter gradients into `grad` (same layout as [`TideModel::params`]).
    pub fn backward_features(&self, fwd: &Forward, d_features: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.layout.total);
        let mut d = d_features.to_vec();
        for (i, slot) in self.layout.convs.iter().enumerate().rev() {
            let (lo, hi) = grad.split_at_mut(slot.bias.start);
            let d_weight = &mut lo[slot.weight.clone()];
            let d_bias = &mut hi[..slot.cout];
            match block_backward(
                &fwd.caches[i],
                &d,
                &self.params[slot.weight.clone()],
                slot.cout,
                d_weight,
                d_bias,
                i > 0,
            ) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}
