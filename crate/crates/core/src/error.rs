use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("record {id}: invalid {field}: {reason}")]
    InvalidRecord {
        id: String,
        field: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("bounding box outside image: {0}")]
    BoxOutsideImage(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("zero vector cannot be normalized")]
    ZeroNorm,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("metric '{0}' missing from checkpoint")]
    MissingMetric(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = core::result::Result<T, Error>;
