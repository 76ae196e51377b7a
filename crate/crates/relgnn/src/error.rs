use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown elementwise op '{0}'")]
    UnknownOp(String),

    #[error("segment {segment} is empty but segment_softmax requires every segment nonempty")]
    EmptySegment { segment: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("graph validation failed: {0}")]
    Graph(String),

    #[error("dataset schema violation: {0}")]
    Schema(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("no gradient for registered parameter '{0}' (dead parameter?)")]
    MissingGradient(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
