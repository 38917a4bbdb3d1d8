use std::io;

use thiserror::Error;

/// Errors raised across the beamforming pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid angle: {0}")]
    InvalidAngle(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate channel: MRT gain is zero")]
    DegenerateChannel,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("prompt has no active probing entries")]
    EmptyMask,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
