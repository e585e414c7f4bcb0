//! Procedurally generated, concept-annotated multi-domain image benchmark.
//!
//! Every class is a layout of 3-4 concept primitives (disks, stripe patches, ...)
//! at fixed anchor points with per-sample jitter. Domains re-render the same
//! geometry with a different style, so concept masks are valid ground truth in
//! every domain. Masks live at feature-grid resolution.

mod augment;
mod dataset;
mod render;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{
    augment_triplet, blur, canny_edges, edge_map, quantize, AugmentConfig, Augmentation, Triplet,
};
pub use dataset::{load_manifest, write_derived, ConceptEntry, ClassEntry, Dataset, Index, MaskRecord, SampleRecord, INDEX_FILE};
pub use render::{layout_masks, render_exemplar, render_layout, sample_layout, Layout, Placement};

use crate::error::{Result, TideError};
use crate::primitives::{ClassId, ConceptId, ConceptMask, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    HStripes,
    VStripes,
}

/// One concept primitive: where it sits and how much of the canvas it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: ConceptId,
    pub name: String,
    pub shape: Shape,
    /// Center in the unit square, `(x, y)`.
    pub anchor: (f64, f64),
    /// Area as a fraction of the canvas.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterPolicy {
    /// Number of distractor blobs in cluttered domains.
    pub count: usize,
    /// Blob radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for ClutterPolicy {
    fn default() -> Self {
        ClutterPolicy {
            count: 6,
            min_radius: 1.0,
            max_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: ClassId,
    pub name: String,
    pub concepts: Vec<ConceptId>,
    #[serde(default)]
    pub clutter: ClutterPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    PlainFill,
    OutlineOnly,
    TexturedFill,
    HueShiftedCluttered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub id: String,
    pub style: Style,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub image_size: usize,
    pub grid_size: usize,
    /// Max per-concept center displacement, as a fraction of the canvas.
    pub jitter: f64,
    /// Max allowed pairwise primitive overlap, as a fraction of the smaller primitive.
    pub overlap_tolerance: f64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub concepts: Vec<ConceptSpec>,
    pub classes: Vec<ClassSpec>,
    pub domains: Vec<DomainStyle>,
}

const SLOT_TL: (f64, f64) = (0.28, 0.28);
const SLOT_TR: (f64, f64) = (0.72, 0.28);
const SLOT_BL: (f64, f64) = (0.28, 0.72);
const SLOT_BR: (f64, f64) = (0.72, 0.72);

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let concept = |id: usize, name: &str, shape: Shape, anchor: (f64, f64)| ConceptSpec {
            id: ConceptId(id),
            name: name.to_string(),
            shape,
            anchor,
            size: 0.10,
        };
        let concepts = vec![
            concept(0, "disk", Shape::Disk, SLOT_TL),
            concept(1, "square", Shape::Square, SLOT_TR),
            concept(2, "triangle", Shape::Triangle, SLOT_BL),
            concept(3, "cross", Shape::Cross, SLOT_BR),
            concept(4, "ring", Shape::Ring, SLOT_TL),
            concept(5, "diamond", Shape::Diamond, SLOT_TR),
            concept(6, "hstripes", Shape::HStripes, SLOT_BL),
            concept(7, "vstripes", Shape::VStripes, SLOT_BR),
        ];
        let class = |id: usize, name: &str, ks: [usize; 3]| ClassSpec {
            id: ClassId(id),
            name: name.to_string(),
            concepts: ks.iter().map(|&k| ConceptId(k)).collect(),
            clutter: ClutterPolicy::default(),
        };
        let classes = vec![
            class(0, "lantern", [0, 1, 2]),
            class(1, "kite", [0, 5, 3]),
            class(2, "robot", [4, 1, 7]),
            class(3, "beetle", [4, 5, 6]),
            class(4, "tower", [0, 6, 3]),
        ];
        let domain = |id: &str, style: Style, seed: u64| DomainStyle {
            id: id.to_string(),
            style,
            seed,
        };
        BenchmarkConfig {
            seed: 7,
            image_size: 28,
            grid_size: 7,
            jitter: 0.05,
            overlap_tolerance: 0.05,
            train_per_domain: 500,
            test_per_domain: 200,
            concepts,
            classes,
            domains: vec![
                domain("plain", Style::PlainFill, 11),
                domain("sketch", Style::OutlineOnly, 12),
                domain("texture", Style::TexturedFill, 13),
                domain("clutter", Style::HueShiftedCluttered, 14),
            ],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TideError::InvalidConfig(m));
        if self.classes.len() < 2 {
            return bad("benchmark needs at least 2 classes".into());
        }
        if self.domains.len() < 2 {
            return bad("benchmark needs at least 2 domains".into());
        }
        if self.train_per_domain + self.test_per_domain == 0 {
            return bad("per-domain sample count must be >= 1".into());
        }
        if self.grid_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.grid_size) {
            return bad(format!(
                "image size {} must be a positive multiple of grid size {}",
                self.image_size, self.grid_size
            ));
        }
        if !(0.0..0.25).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 0.25)", self.jitter));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if c.id.0 != i {
                return bad(format!("concept ids must be 0..n in order; found {} at {i}", c.id.0));
            }
            if !(c.size > 0.0 && c.size < 0.5) {
                return bad(format!("concept {} size {} outside (0, 0.5)", c.name, c.size));
            }
            let half = render::half_extent(c.shape, c.size * (self.image_size * self.image_size) as f64)
                / self.image_size as f64;
            let reach = half + self.jitter;
            let (x, y) = c.anchor;
            if x - reach < 0.0 || x + reach > 1.0 || y - reach < 0.0 || y + reach > 1.0 {
                return bad(format!("concept {} can leave the canvas", c.name));
            }
        }
        for (i, cls) in self.classes.iter().enumerate() {
            if cls.id.0 != i {
                return bad(format!("class ids must be 0..n in order; found {} at {i}", cls.id.0));
            }
            if !(3..=4).contains(&cls.concepts.len()) {
                return bad(format!("class {} must have 3-4 concepts", cls.name));
            }
            let mut ks = cls.concepts.clone();
            ks.sort();
            ks.dedup();
            if ks.len() != cls.concepts.len() {
                return bad(format!("class {} lists a concept twice", cls.name));
            }
            if ks.iter().any(|k| k.0 >= self.concepts.len()) {
                return bad(format!("class {} references an unknown concept", cls.name));
            }
            if cls.clutter.min_radius < 0.0 || cls.clutter.max_radius < cls.clutter.min_radius {
                return bad(format!("class {} has an invalid clutter radius range", cls.name));
            }
        }
        for a in 0..self.classes.len() {
            for b in a + 1..self.classes.len() {
                let shared = self.classes[a]
                    .concepts
                    .iter()
                    .filter(|k| self.classes[b].concepts.contains(k))
                    .count();
                if shared > 2 {
                    return bad(format!(
                        "classes {} and {} share {shared} concepts (max 2)",
                        self.classes[a].name, self.classes[b].name
                    ));
                }
            }
        }
        let mut ids: Vec<&str> = self.domains.iter().map(|d| d.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return bad("domain ids must be unique".into());
        }
        if self
            .domains
            .iter()
            .any(|d| d.id.is_empty() || !d.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        {
            return bad("domain ids must be non-empty [A-Za-z0-9_]".into());
        }
        Ok(())
    }

    pub fn cell_size(&self) -> usize {
        self.image_size / self.grid_size
    }

    pub fn domain(&self, id: &str) -> Option<&DomainStyle> {
        self.domains.iter().find(|d| d.id == id)
    }
}

/// An 8-bit RGB image as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }
}

/// One labelled image with its concept masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub domain: String,
    pub split: Split,
    pub class_id: ClassId,
    /// Concepts present in the image, sorted.
    pub concept_ids: Vec<ConceptId>,
    /// One mask per present concept, in `concept_ids` order.
    pub masks: Vec<ConceptMask>,
    pub image: RgbImage,
}

impl Sample {
    pub fn mask(&self, concept: ConceptId) -> Option<&ConceptMask> {
        self.masks.iter().find(|m| m.concept_id == concept)
    }

    pub fn has_concept(&self, concept: ConceptId) -> bool {
        self.concept_ids.binary_search(&concept).is_ok()
    }
}

/// Deterministic 64-bit mix used to derive independent per-sample RNG seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Generate every sample in memory, in index order: domains in config order,
/// then train before test, then by index. Classes cycle with the index.
pub fn generate_samples(config: &BenchmarkConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut jobs = Vec::new();
    for (d, domain) in config.domains.iter().enumerate() {
        for (split, n) in [
            (Split::Train, config.train_per_domain),
            (Split::Test, config.test_per_domain),
        ] {
            for i in 0..n {
                jobs.push((d, domain, split, i));
            }
        }
    }
    jobs.par_iter()
        .map(|&(d, domain, split, i)| {
            let class = ClassId(i % config.classes.len());
            let layout_seed = mix_seed(&[config.seed, d as u64, split as u64, i as u64, 1]);
            let style_seed = mix_seed(&[config.seed, domain.seed, split as u64, i as u64, 2]);
            let layout = sample_layout(config, class, layout_seed)?;
            let image = render_layout(config, &layout, domain.style, style_seed);
            let masks = layout_masks(config, &layout);
            let mut concept_ids: Vec<ConceptId> = masks.iter().map(|m| m.concept_id).collect();
            concept_ids.sort();
            let mut masks = masks;
            masks.sort_by_key(|m| m.concept_id);
            Ok(Sample {
                sample_id: format!("{}-{}-{:05}", domain.id, split.as_str(), i),
                domain: domain.id.clone(),
                split,
                class_id: class,
                concept_ids,
                masks,
                image,
            })
        })
        .collect()
}

/// Generate the benchmark and write it to `out_dir` atomically.
pub fn generate_dataset(config: &BenchmarkConfig, out_dir: &std::path::Path) -> Result<Dataset> {
    let samples = generate_samples(config)?;
    dataset::write_dataset(config, &samples, out_dir)
}
