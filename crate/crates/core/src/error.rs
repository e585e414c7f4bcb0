use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TideError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TideError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("zero-norm vector in cosine distance")]
    ZeroNorm,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("no valid negative in the triplet pool")]
    TripletExhausted,

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("concept provider failed after {attempts} attempt(s): {message}")]
    Provider {
        message: String,
        attempts: u32,
        /// Backoff the caller should wait before the next attempt, in milliseconds.
        retry_after_ms: Option<u64>,
    },

    #[error("overlap undefined for an all-zero concept mask")]
    UndefinedOverlap,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("label {label} out of range for {count} outputs")]
    InvalidLabel { label: usize, count: usize },

    #[error("non-finite loss at step {step}; batch dump written to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error("concept {0} has no supporting samples")]
    MissingConceptSupport(usize),

    #[error("cannot summarize an empty trace set")]
    EmptyReport,

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl TideError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TideError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for TideError {
    fn from(e: serde_json::Error) -> Self {
        TideError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for TideError {
    fn from(e: toml::de::Error) -> Self {
        TideError::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for TideError {
    fn from(e: toml::ser::Error) -> Self {
        TideError::Serde(e.to_string())
    }
}
