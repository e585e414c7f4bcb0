//! Light perturbations used to build positives for the concept triplet loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Result, TideError};
use crate::primitives::{ConceptId, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Augmentation {
    /// Per-channel color quantization to `levels` evenly spaced values.
    Quantize { levels: u32 },
    /// Separable Gaussian blur; `sigma <= 0` is the identity.
    Blur { sigma: f64 },
    /// Canny edge map drawn as dark strokes on white, replicated to every channel.
    Edges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub quantize_levels: Vec<u32>,
    pub blur_sigmas: Vec<f64>,
    pub edges: bool,
    pub edge_sigma: f64,
    /// Hysteresis thresholds as fractions of the strongest gradient.
    pub edge_low: f64,
    pub edge_high: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            quantize_levels: vec![3, 4],
            blur_sigmas: vec![0.7, 1.0],
            edges: true,
            edge_sigma: 0.6,
            edge_low: 0.1,
            edge_high: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quantize_levels.iter().any(|&l| l < 2) {
            return Err(TideError::InvalidConfig("quantization needs >= 2 levels".into()));
        }
        if self.blur_sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(TideError::InvalidConfig("blur sigma must be finite and >= 0".into()));
        }
        if !(0.0 < self.edge_low && self.edge_low <= self.edge_high && self.edge_high <= 1.0) {
            return Err(TideError::InvalidConfig("edge thresholds must satisfy 0 < low <= high <= 1".into()));
        }
        if self.quantize_levels.is_empty() && self.blur_sigmas.is_empty() && !self.edges {
            return Err(TideError::InvalidConfig("no augmentation enabled".into()));
        }
        Ok(())
    }

    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Augmentation {
        let mut options: Vec<Augmentation> = Vec::new();
        if let Some(&levels) = self.quantize_levels.choose(rng) {
            options.push(Augmentation::Quantize { levels });
        }
        if let Some(&sigma) = self.blur_sigmas.choose(rng) {
            options.push(Augmentation::Blur { sigma });
        }
        if self.edges {
            options.push(Augmentation::Edges);
        }
        *options.choose(rng).expect("validated: at least one augmentation")
    }

    pub fn apply(&self, aug: Augmentation, image: &Image) -> Image {
        match aug {
            Augmentation::Quantize { levels } => quantize(image, levels),
            Augmentation::Blur { sigma } => blur(image, sigma),
            Augmentation::Edges => edge_map(image, self.edge_sigma, self.edge_low, self.edge_high),
        }
    }
}

pub fn quantize(image: &Image, levels: u32) -> Image {
    let top = (levels.max(2) - 1) as f64;
    Image {
        data: image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * top).round() / top).collect(),
        ..image.clone()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur of a single `h x w` plane with clamp-to-edge borders.
fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

pub fn blur(image: &Image, sigma: f64) -> Image {
    if !(sigma > 0.0) || (3.0 * sigma).ceil() < 1.0 {
        return image.clone();
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut data = vec![0.0; h * w * c];
    for ch in 0..c {
        let plane: Vec<f64> = (0..h * w).map(|i| image.data[i * c + ch]).collect();
        for (i, v) in blur_plane(&plane, h, w, sigma).into_iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    Image { data, ..image.clone() }
}

/// Canny edges of the channel-mean intensity: smoothing, Sobel gradients,
/// non-maximum suppression and hysteresis. Returns a binary `h x w` edge map.
pub fn canny_edges(image: &Image, sigma: f64, low: f64, high: f64) -> Vec<bool> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let gray: Vec<f64> = image
        .data
        .chunks_exact(c)
        .map(|p| p.iter().sum::<f64>() / c as f64)
        .collect();
    let smooth = if sigma > 0.0 { blur_plane(&gray, h, w, sigma) } else { gray };
    let at = |x: i64, y: i64| smooth[(y.clamp(0, h as i64 - 1) as usize) * w + x.clamp(0, w as i64 - 1) as usize];
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            let i = y as usize * w + x as usize;
            mag[i] = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak <= 1e-12 {
        return vec![false; h * w];
    }
    let m = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            if mag[i] >= m(x + dx, y + dy) && mag[i] >= m(x - dx, y - dy) {
                thin[i] = mag[i];
            }
        }
    }
    let (lo, hi) = (low * peak, high * peak);
    let mut edge = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= hi).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= lo {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edge
}

pub fn edge_map(image: &Image, sigma: f64, low: f64, high: f64) -> Image {
    let edges = canny_edges(image, sigma, low, high);
    let c = image.channels;
    let mut data = Vec::with_capacity(edges.len() * c);
    for e in edges {
        let v = if e { 0.0 } else { 1.0 };
        data.extend(std::iter::repeat_n(v, c));
    }
    Image { data, ..image.clone() }
}

/// A concept triplet: the augmented positive shares the anchor's masks, the
/// negative is `pool[negative]` pooled on its concept `negative_concept`.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub concept: ConceptId,
    pub augmentation: Augmentation,
    pub positive: Image,
    pub negative: usize,
    pub negative_concept: ConceptId,
}

/// Draw a triplet for `anchor`. The anchor concept is chosen uniformly from
/// `choices` (the anchor's own concepts when empty); the negative is a pool
/// sample holding some concept the anchor lacks.
pub fn augment_triplet<R: Rng + ?Sized>(
    anchor: &Sample,
    choices: &[ConceptId],
    pool: &[&Sample],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Triplet> {
    let own: Vec<ConceptId> = if choices.is_empty() {
        anchor.concept_ids.clone()
    } else {
        choices.iter().copied().filter(|k| anchor.mask(*k).is_some()).collect()
    };
    let &concept = own.choose(rng).ok_or_else(|| {
        TideError::InvalidInput(format!("sample {} has no usable concept", anchor.sample_id))
    })?;
    let foreign = |s: &Sample| -> Vec<ConceptId> {
        s.masks
            .iter()
            .filter(|m| !anchor.has_concept(m.concept_id) && !m.is_empty())
            .map(|m| m.concept_id)
            .collect()
    };
    let valid: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, s)| !foreign(s).is_empty())
        .map(|(i, _)| i)
        .collect();
    let &negative = valid.choose(rng).ok_or(TideError::TripletExhausted)?;
    let &negative_concept = foreign(pool[negative])
        .choose(rng)
        .expect("filtered to non-empty");
    let augmentation = config.choose(rng);
    let positive = config.apply(augmentation, &anchor.image.to_image());
    Ok(Triplet {
        concept,
        augmentation,
        positive,
        negative,
        negative_concept,
    })
}
