use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum PopError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint/dataset format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PopError>;

impl PopError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        PopError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        PopError::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        PopError::Format(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        PopError::Protocol(msg.into())
    }
}
