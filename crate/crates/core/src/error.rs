//! Crate-wide error type for fallible operations. Shape violations inside
//! the math kernels are programmer errors and panic instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty mask: no frames to predict")]
    EmptyMask,

    #[error("parameter tree mismatch: {0}")]
    TreeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("k-means needs at least as many points as clusters (n={n}, v={v})")]
    TooFewPoints { n: usize, v: usize },

    #[error("zero-entropy reference labels: {0}")]
    ZeroEntropy(String),

    #[error("no valid triples in the item set")]
    NoValidTriples,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
