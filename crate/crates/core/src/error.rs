use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("dimension mismatch: {what} expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model has {count} parameters, exact ICE is limited to {limit}")]
    TooManyParameters { count: usize, limit: usize },

    #[error("singular value decomposition failed: {0}")]
    Svd(String),

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("malformed model document: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
