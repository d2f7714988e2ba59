use thiserror::Error;

/// Errors raised by the attention kernels, the differentiation engine and
/// the captioner.
#[derive(Error, Debug)]
pub enum HocaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("capacity exceeded: {requested} elements requested, cap is {cap}")]
    Capacity { requested: usize, cap: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HocaError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HocaError::Dimension(msg.into()))
}
