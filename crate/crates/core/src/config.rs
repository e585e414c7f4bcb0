//! Run configuration shared by every pipeline stage, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{ListStyle, MockExtractor, RetryPolicy};
use crate::correction::CorrectionConfig;
use crate::error::{Result, TideError};
use crate::io::write_atomic;
use crate::synthbench::BenchmarkConfig;
use crate::training::{LossWeights, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Which masks the training and discovery stages read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Masks rendered together with the benchmark.
    #[default]
    Generated,
    /// Masks produced by the annotate stage.
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Existing dataset to use instead of generating one under the output directory.
    pub path: Option<PathBuf>,
    pub masks: MaskSource,
    /// Source domains to train on; empty means every domain in turn.
    pub sources: Vec<String>,
    /// Evaluation domains; empty means every non-source domain.
    pub targets: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: None,
            masks: MaskSource::Generated,
            sources: vec!["plain".into()],
            targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Service endpoint for the external provider.
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the credential.
    pub token_env: String,
    pub retry: RetryPolicy,
    pub list_style: ListStyle,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: None,
            token_env: "TIDE_PROVIDER_TOKEN".into(),
            retry: RetryPolicy::default(),
            list_style: ListStyle::Oxford,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub provider: ProviderConfig,
    pub extractor: MockExtractor,
    /// Reuse transferred masks across runs.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    /// Overlap threshold for the important-concept sets.
    pub tau: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig { tau: 0.5 }
    }
}

/// Loss terms that can be switched off on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    K,
    Csa,
    Lcc,
}

impl std::str::FromStr for Ablation {
    type Err = TideError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Ablation::K),
            "csa" => Ok(Ablation::Csa),
            "lcc" => Ok(Ablation::Lcc),
            other => Err(TideError::InvalidConfig(format!("unknown ablation `{other}` (expected k, csa or lcc)"))),
        }
    }
}

/// Zero the ablated terms' weights.
pub fn apply_ablations(weights: &LossWeights, ablations: &BTreeSet<Ablation>) -> LossWeights {
    let mut w = *weights;
    for a in ablations {
        match a {
            Ablation::K => w.concept = 0.0,
            Ablation::Csa => w.csa = 0.0,
            Ablation::Lcc => w.lcc = 0.0,
        }
    }
    w
}

/// Row label naming the active loss terms, e.g. `L_c+L_k+L_CSA`.
pub fn objective_label(weights: &LossWeights) -> String {
    let mut parts = vec!["L_c"];
    if weights.concept > 0.0 {
        parts.push("L_k");
    }
    if weights.csa > 0.0 {
        parts.push("L_CSA");
    }
    if weights.lcc > 0.0 {
        parts.push("L_LCC");
    }
    parts.join("+")
}

/// Directory-safe form of [`objective_label`].
pub fn objective_slug(weights: &LossWeights) -> String {
    objective_label(weights).replace('+', "-").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the benchmark and training seeds when set.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub benchmark: BenchmarkConfig,
    pub annotation: AnnotationConfig,
    pub discovery: DiscoveryConfig,
    pub train: TrainConfig,
    pub correction: CorrectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            benchmark: BenchmarkConfig::default(),
            annotation: AnnotationConfig::default(),
            discovery: DiscoveryConfig::default(),
            train: TrainConfig::default(),
            correction: CorrectionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TideError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Apply overrides, fill in derived values and validate.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.benchmark.seed = s;
            self.train.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out.as_os_str().is_empty() {
            return Err(TideError::InvalidConfig("output directory must be set".into()));
        }
        self.benchmark.validate()?;
        self.train.validate()?;
        self.correction.validate()?;
        if !(self.discovery.tau > 0.0 && self.discovery.tau < 1.0) {
            return Err(TideError::InvalidConfig("tau must lie in (0, 1)".into()));
        }
        if self.annotation.provider.kind == ProviderKind::External && self.annotation.provider.endpoint.is_none() {
            return Err(TideError::InvalidConfig("external provider needs an endpoint".into()));
        }
        if self.dataset.path.is_none() {
            let known: BTreeSet<&str> = self.benchmark.domains.iter().map(|d| d.id.as_str()).collect();
            for d in self.dataset.sources.iter().chain(&self.dataset.targets) {
                if !known.contains(d.as_str()) {
                    return Err(TideError::InvalidConfig(format!("unknown domain `{d}`")));
                }
            }
        }
        if let Some(d) = self.dataset.targets.iter().find(|d| self.dataset.sources.contains(d)) {
            return Err(TideError::InvalidConfig(format!("domain `{d}` is both source and target")));
        }
        Ok(())
    }

    /// Write the resolved configuration into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let path = self.out.join(RESOLVED_CONFIG_FILE);
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}
