//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor, calibration, scaling and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("scale values must be strictly positive and finite (got {0})")]
    NonPositiveScale(f64),

    #[error("empty tensor not allowed: {0}")]
    EmptyTensor(String),

    #[error("unsupported dtype for {op}: {dtype}")]
    UnsupportedDtype { op: &'static str, dtype: String },

    #[error("unknown FP8 format name: {0:?} (expected e4m3, e4m3_gaudi2 or e5m2)")]
    UnknownFormat(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing calibration statistics for layer {0:?}")]
    MissingStats(String),

    #[error("invalid model manifest: {0}")]
    InvalidManifest(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
