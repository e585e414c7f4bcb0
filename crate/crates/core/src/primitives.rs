//! Shared grid, volume and vector types plus the elementary numeric operations
//! every stage builds on.
//!
//! Layout conventions: 2-D grids are row-major `(row, col)`; feature volumes are
//! `(row, col, channel)` with the channel index fastest.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};

/// Index of a class in a dataset's class list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

/// Index of a concept in a dataset's concept vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class#{}", self.0)
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "concept#{}", self.0)
    }
}

/// A real-valued row-major 2-D grid with no range constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(TideError::InvalidInput(format!(
                "map of {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Map2 {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Map2 {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(TideError::InvalidInput("ragged rows".into()));
        }
        Map2::new(height, width, rows.concat())
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Dense activation grid from the last convolutional stage, shape `(H, W, C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVolume {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TideError::InvalidInput(
                "feature volume dimensions must be positive".into(),
            ));
        }
        if data.len() != height * width * channels {
            return Err(TideError::InvalidInput(format!(
                "feature volume {height}x{width}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TideError::InvalidInput(
                "feature volume contains non-finite values".into(),
            ));
        }
        Ok(FeatureVolume {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureVolume {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of one cell.
    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }
}

/// What a saliency map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum SaliencyTarget {
    Class(ClassId),
    Concept(ConceptId),
}

/// Min-max normalized saliency map, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub target: SaliencyTarget,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// True when the map carries no signal (every cell zero).
    pub fn is_degenerate(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn as_map(&self) -> Map2 {
        Map2 {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }
}

/// Binary concept localization at feature-grid resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMask {
    pub concept_id: ConceptId,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ConceptMask {
    pub fn new(concept_id: ConceptId, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(TideError::InvalidInput(format!(
                "mask of {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(TideError::InvalidInput("mask entries must be 0 or 1".into()));
        }
        Ok(ConceptMask {
            concept_id,
            height,
            width,
            data,
        })
    }

    pub fn empty(concept_id: ConceptId, height: usize, width: usize) -> Self {
        ConceptMask {
            concept_id,
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Mask-pooled feature for one concept on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub concept_id: ConceptId,
    pub source_sample_id: String,
    pub data: Vec<f64>,
}

/// Prototype of a concept: mean of its pooled features over the source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub concept_id: ConceptId,
    pub support_count: usize,
    pub data: Vec<f64>,
}

/// An RGB (or generally multi-channel) image with values in `[0, 1]`, `(H, W, C)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(TideError::InvalidInput(format!(
                "image {height}x{width}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(TideError::InvalidInput("rgb buffer size mismatch".into()));
        }
        Image::new(
            height,
            width,
            3,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Min-max normalize a raw map to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(raw: &Map2, target: SaliencyTarget) -> Result<SaliencyMap> {
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(TideError::InvalidInput(
            "saliency map contains non-finite values".into(),
        ));
    }
    let (lo, hi) = raw
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        raw.data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; raw.data.len()]
    };
    Ok(SaliencyMap {
        target,
        height: raw.height,
        width: raw.width,
        data,
    })
}

/// Threshold a normalized map: a cell is set iff its value is `>= threshold`.
pub fn binarize(map: &SaliencyMap, threshold: f64, concept_id: ConceptId) -> Result<ConceptMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TideError::InvalidConfig(format!(
            "binarization threshold {threshold} must lie in (0, 1)"
        )));
    }
    Ok(ConceptMask {
        concept_id,
        height: map.height,
        width: map.width,
        data: map
            .data
            .iter()
            .map(|&v| u8::from(v >= threshold))
            .collect(),
    })
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TideError::InvalidInput(format!(
            "cosine distance between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(TideError::InvalidInput("non-finite vector entries".into()));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(TideError::ZeroNorm);
    }
    let cos = dot / (na.sqrt() * nb.sqrt());
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Cosine distance where a vanished (zero-norm) vector counts as maximally distant.
pub fn cosine_distance_or_max(a: &[f64], b: &[f64]) -> Result<f64> {
    match cosine_distance(a, b) {
        Err(TideError::ZeroNorm) => Ok(2.0),
        other => other,
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TideError::InvalidInput(format!(
            "euclidean distance between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
