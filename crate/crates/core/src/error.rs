use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("prompt has no tokens")]
    EmptyPrompt,

    #[error("token index {index} out of range for prompt of length {len}")]
    TokenOutOfRange { index: usize, len: usize },

    #[error("mask union over an empty list")]
    EmptyList,

    #[error("mask not frozen before injection at step {0}")]
    MaskNotReady(usize),

    #[error("mask already frozen, cannot accumulate step {0}")]
    AlreadyFrozen(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("finite-difference step must be non-zero")]
    InvalidStep,

    #[error("sweep has no values")]
    EmptySweep,

    #[error("trajectory does not match schedule: {0}")]
    TrajectoryMismatch(String),

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
