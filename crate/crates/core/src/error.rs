use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("{path}: cannot encode image: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value range: {0}")]
    Range(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("insufficient pool for {class} ({provenance}): need {needed}, have {available} (short by {})", needed - available)]
    InsufficientPool {
        class: String,
        provenance: String,
        needed: usize,
        available: usize,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unknown preset {name:?}; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("data leakage: {count} path(s) appear in both train and validation manifests (first: {first})")]
    Leakage { count: usize, first: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite training loss at step {step}: t histogram {t_histogram:?}, grad norm {grad_norm}")]
    NonFiniteLoss {
        step: u64,
        t_histogram: Vec<usize>,
        grad_norm: f64,
    },

    #[error("linear algebra: {0}")]
    LinAlg(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("features: expected dimension {expected}, got {actual}")]
    FeatureDim { expected: usize, actual: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
