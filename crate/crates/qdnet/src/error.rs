use thiserror::Error;

#[derive(Debug, Error)]
pub enum QdError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("layer {index} ({kind}): {message}")]
    Layer {
        index: usize,
        kind: String,
        message: String,
    },

    #[error("model structure error: {0}")]
    Structure(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("quantization error: {0}")]
    Quant(String),

    #[error("requant multiplier out of contract: M = {m} >= 1; recompute the output scale from wider observer statistics")]
    MultiplierOutOfRange { m: f64 },

    #[error("layer {index} has no observer statistics; run calibration or QAT before conversion")]
    Unobserved { index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QdError>;
