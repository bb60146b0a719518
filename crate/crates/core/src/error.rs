use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefaError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed mask file: {0}")]
    MaskFormat(String),

    #[error("simulator invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DefaError> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(what: impl Into<String>, expected: usize, actual: usize) -> DefaError {
    DefaError::ShapeMismatch {
        what: what.into(),
        expected,
        actual,
    }
}

pub(crate) fn ensure_shape(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(shape_mismatch(what, expected, actual))
    }
}
