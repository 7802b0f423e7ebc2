use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the aquaforge library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("non-finite value at flat index {index} ({value})")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input {height}x{width} is not divisible by {multiple}")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("non-finite loss in term {term}")]
    NonFiniteLoss { term: &'static str },

    #[error("missing target for loss term {term} with non-zero weight")]
    MissingTarget { term: &'static str },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("task {task} failed: {source}")]
    TaskFailed {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
