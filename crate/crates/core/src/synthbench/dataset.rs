//! Directory-plus-index dataset format.
//!
//! ```text
//! <root>/index.json              manifest (schema below)
//! <root>/images/<sample_id>.png  8-bit RGB image
//! <root>/masks/<sample_id>_k<concept>.png  8-bit gray mask, values {0, 255}
//! ```
//!
//! `index.json` fields: `format` (always `"tide-synthbench"`), `version` (1),
//! `image_height`, `image_width`, `grid_height`, `grid_width`, `classes`
//! (`id`, `name`, `concepts`), `concepts` (`id`, `name`), `domains`,
//! `generator` (the benchmark config, or null for imported data) and
//! `samples`, each with `sample_id`, `domain`, `split`, `class_id`,
//! `concept_ids`, `image` and `masks`. File references carry a relative `path`
//! and a lowercase hex `sha256` of the file bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BenchmarkConfig, RgbImage, Sample, Split};
use crate::error::{Result, TideError};
use crate::io::{decode_png_gray, decode_png_rgb, encode_png_gray, encode_png_rgb, read, sha256_hex, write_atomic};
use crate::primitives::{ClassId, ConceptId, ConceptMask};

pub const INDEX_FILE: &str = "index.json";
const FORMAT: &str = "tide-synthbench";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub concept_id: ConceptId,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub domain: String,
    pub split: Split,
    pub class_id: ClassId,
    pub concept_ids: Vec<ConceptId>,
    pub image: FileRef,
    pub masks: Vec<MaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
    pub concepts: Vec<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub id: ConceptId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Index {
    pub format: String,
    pub version: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub classes: Vec<ClassEntry>,
    pub concepts: Vec<ConceptEntry>,
    pub domains: Vec<String>,
    pub generator: Option<BenchmarkConfig>,
    pub samples: Vec<SampleRecord>,
}

impl Index {
    fn validate(&self) -> Result<()> {
        let corrupt = |m: String| Err(TideError::CorruptDataset(m));
        if self.format != FORMAT {
            return corrupt(format!("unexpected format `{}`", self.format));
        }
        if self.version != VERSION {
            return corrupt(format!("unsupported version {}", self.version));
        }
        if self.grid_height == 0 || self.grid_width == 0 || self.image_height == 0 || self.image_width == 0 {
            return corrupt("zero image or grid dimension".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id.0 != i || c.concepts.iter().any(|k| k.0 >= self.concepts.len()) {
                return corrupt(format!("bad class entry {i}"));
            }
        }
        for (i, k) in self.concepts.iter().enumerate() {
            if k.id.0 != i {
                return corrupt(format!("bad concept entry {i}"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id.as_str()) {
                return corrupt(format!("duplicate sample id {}", s.sample_id));
            }
            if !self.domains.contains(&s.domain) {
                return corrupt(format!("sample {} has unknown domain {}", s.sample_id, s.domain));
            }
            let Some(class) = self.classes.get(s.class_id.0) else {
                return corrupt(format!("sample {} has unknown class", s.sample_id));
            };
            if s.concept_ids.iter().any(|k| !class.concepts.contains(k)) {
                return corrupt(format!("sample {} lists a concept outside its class", s.sample_id));
            }
            if s.masks.iter().any(|m| !s.concept_ids.contains(&m.concept_id)) {
                return corrupt(format!("sample {} has a mask for an absent concept", s.sample_id));
            }
            for path in std::iter::once(&s.image.path).chain(s.masks.iter().map(|m| &m.path)) {
                if path.starts_with('/') || path.split('/').any(|c| c == "..") {
                    return corrupt(format!("sample {} references path outside the dataset", s.sample_id));
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// An opened dataset. Samples are decoded lazily on iteration.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    index: Index,
}

pub fn load_manifest(root: &Path) -> Result<Dataset> {
    Dataset::open(root)
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| TideError::io(&path, e))?;
        let index: Index = serde_json::from_str(&text)
            .map_err(|e| TideError::CorruptDataset(format!("{}: {e}", path.display())))?;
        index.validate()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn num_classes(&self) -> usize {
        self.index.classes.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.index.concepts.len()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.index.samples
    }

    pub fn record(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.index.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Lazily load samples in index order, optionally restricted to one domain and split.
    pub fn iter<'a>(
        &'a self,
        domain: Option<&'a str>,
        split: Option<Split>,
    ) -> impl Iterator<Item = Result<Sample>> + 'a {
        self.index
            .samples
            .iter()
            .filter(move |r| domain.is_none_or(|d| r.domain == d) && split.is_none_or(|s| r.split == s))
            .map(move |r| self.load(r))
    }

    pub fn load_all(&self, domain: Option<&str>, split: Option<Split>) -> Result<Vec<Sample>> {
        self.iter(domain, split).collect()
    }

    fn checked_read(&self, rel: &str, sha: &str) -> Result<Vec<u8>> {
        let bytes = read(&self.root.join(rel))?;
        let actual = sha256_hex(&bytes);
        if actual != sha {
            return Err(TideError::CorruptDataset(format!(
                "checksum mismatch for {rel}: index {sha}, file {actual}"
            )));
        }
        Ok(bytes)
    }

    pub fn load(&self, record: &SampleRecord) -> Result<Sample> {
        let bytes = self.checked_read(&record.image.path, &record.image.sha256)?;
        let (w, h, rgb) = decode_png_rgb(&bytes)?;
        if (h, w) != (self.index.image_height, self.index.image_width) {
            return Err(TideError::CorruptDataset(format!(
                "{} is {w}x{h}, index says {}x{}",
                record.image.path, self.index.image_width, self.index.image_height
            )));
        }
        let mut masks = Vec::with_capacity(record.masks.len());
        for m in &record.masks {
            let bytes = self.checked_read(&m.path, &m.sha256)?;
            let (mw, mh, gray) = decode_png_gray(&bytes)?;
            if (mh, mw) != (self.index.grid_height, self.index.grid_width) {
                return Err(TideError::CorruptDataset(format!("mask {} has wrong size", m.path)));
            }
            if gray.iter().any(|&v| v != 0 && v != 255) {
                return Err(TideError::CorruptDataset(format!("mask {} is not binary", m.path)));
            }
            masks.push(ConceptMask {
                concept_id: m.concept_id,
                height: mh,
                width: mw,
                data: gray.iter().map(|&v| u8::from(v == 255)).collect(),
            });
        }
        Ok(Sample {
            sample_id: record.sample_id.clone(),
            domain: record.domain.clone(),
            split: record.split,
            class_id: record.class_id,
            concept_ids: record.concept_ids.clone(),
            masks,
            image: RgbImage {
                height: h,
                width: w,
                data: rgb,
            },
        })
    }
}

pub(crate) fn mask_png(mask: &ConceptMask) -> Result<Vec<u8>> {
    let gray: Vec<u8> = mask.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    encode_png_gray(mask.width, mask.height, &gray)
}

pub(crate) fn mask_path(sample_id: &str, concept: ConceptId) -> String {
    format!("masks/{sample_id}_k{}.png", concept.0)
}

/// Encode samples into files under `dir` and return their records.
pub(crate) fn write_samples(dir: &Path, samples: &[Sample]) -> Result<Vec<SampleRecord>> {
    fs::create_dir_all(dir.join("images")).map_err(|e| TideError::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| TideError::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let png = encode_png_rgb(s.image.width, s.image.height, &s.image.data)?;
        let image_rel = format!("images/{}.png", s.sample_id);
        fs::write(dir.join(&image_rel), &png).map_err(|e| TideError::io(dir.join(&image_rel), e))?;
        let mut masks = Vec::with_capacity(s.masks.len());
        for m in &s.masks {
            let png = mask_png(m)?;
            let rel = mask_path(&s.sample_id, m.concept_id);
            fs::write(dir.join(&rel), &png).map_err(|e| TideError::io(dir.join(&rel), e))?;
            masks.push(MaskRecord {
                concept_id: m.concept_id,
                path: rel,
                sha256: sha256_hex(&png),
            });
        }
        records.push(SampleRecord {
            sample_id: s.sample_id.clone(),
            domain: s.domain.clone(),
            split: s.split,
            class_id: s.class_id,
            concept_ids: s.concept_ids.clone(),
            image: FileRef {
                path: image_rel,
                sha256: sha256_hex(&png),
            },
            masks,
        });
    }
    Ok(records)
}

/// Write a complete dataset under a temporary sibling directory and rename it
/// into place; on failure `out_dir` is left as it was. An existing dataset at
/// `out_dir` is replaced; any other non-empty directory is refused.
pub(crate) fn write_dataset_with(index_of: impl FnOnce(Vec<SampleRecord>) -> Index, samples: &[Sample], out_dir: &Path) -> Result<Dataset> {
    let replacing = out_dir.join(INDEX_FILE).is_file();
    if out_dir.exists() && !replacing {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| TideError::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty {
            return Err(TideError::io(
                out_dir,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty"),
            ));
        }
    }
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| TideError::io(&parent, e))?;
    let staging = crate::io::temp_sibling(out_dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| TideError::io(&staging, e))?;
    }
    let result = (|| {
        let records = write_samples(&staging, samples)?;
        let index = index_of(records);
        index.validate()?;
        let text = serde_json::to_string_pretty(&index)?;
        write_atomic(&staging.join(INDEX_FILE), text.as_bytes())?;
        if replacing {
            let backup = crate::io::temp_sibling(&staging);
            fs::rename(out_dir, &backup).map_err(|e| TideError::io(out_dir, e))?;
            fs::rename(&staging, out_dir).map_err(|e| TideError::io(out_dir, e))?;
            fs::remove_dir_all(&backup).map_err(|e| TideError::io(&backup, e))
        } else {
            if out_dir.exists() {
                fs::remove_dir(out_dir).map_err(|e| TideError::io(out_dir, e))?;
            }
            fs::rename(&staging, out_dir).map_err(|e| TideError::io(out_dir, e))
        }
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    Dataset::open(out_dir)
}

pub(crate) fn write_dataset(config: &BenchmarkConfig, samples: &[Sample], out_dir: &Path) -> Result<Dataset> {
    let index_of = |records| Index {
        format: FORMAT.to_string(),
        version: VERSION,
        image_height: config.image_size,
        image_width: config.image_size,
        grid_height: config.grid_size,
        grid_width: config.grid_size,
        classes: config
            .classes
            .iter()
            .map(|c| ClassEntry {
                id: c.id,
                name: c.name.clone(),
                concepts: c.concepts.clone(),
            })
            .collect(),
        concepts: config
            .concepts
            .iter()
            .map(|k| ConceptEntry {
                id: k.id,
                name: k.name.clone(),
            })
            .collect(),
        domains: config.domains.iter().map(|d| d.id.clone()).collect(),
        generator: Some(config.clone()),
        samples: records,
    };
    write_dataset_with(index_of, samples, out_dir)
}

/// Write a copy of `base`'s metadata with new sample contents (used by annotation).
pub fn write_derived(base: &Index, samples: &[Sample], out_dir: &Path) -> Result<Dataset> {
    let index_of = |records| Index {
        samples: records,
        ..base.clone()
    };
    write_dataset_with(index_of, samples, out_dir)
}
