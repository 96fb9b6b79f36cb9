use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum MoeError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid cluster pair: k = k' = {0}")]
    InvalidPair(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MoeError>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> MoeError {
    MoeError::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
