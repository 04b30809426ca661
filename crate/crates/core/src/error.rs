//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("sample size too small: need at least {min}, got {got}")]
    SampleSize { min: usize, got: usize },

    #[error("time grid error: {0}")]
    Grid(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric abort: {0}")]
    NumericAbort(String),

    #[error("point cloud format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
