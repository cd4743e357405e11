//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CclError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CclError>;

impl CclError {
    pub fn dim(msg: impl Into<String>) -> Self {
        CclError::Dimension(msg.into())
    }
}
