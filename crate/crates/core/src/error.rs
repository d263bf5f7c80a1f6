use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("degenerate information: |I| = {0:e}")]
    DegenerateInformation(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
}

pub type Result<T> = std::result::Result<T, Error>;
