//! Error type shared by every module of the engine.

use thiserror::Error;

/// Errors raised by tensor arithmetic, training, data ingestion and the oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary or text input. `offset` is the byte offset (or line
    /// number for text formats) at which the problem was detected.
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("applicability error: {0}")]
    Applicability(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }
}
