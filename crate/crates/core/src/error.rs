use std::path::PathBuf;

use thiserror::Error;

use crate::training::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("time {t} outside the admissible range {range}")]
    TimeOutOfRange { t: f64, range: &'static str },

    #[error("degenerate probability path: {0}")]
    DegeneratePath(String),

    #[error("coefficient singular at t = {t}")]
    Singular { t: f64 },

    #[error("non-finite state at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("STFT window/hop pairing cannot be inverted: {0}")]
    ColaViolation(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged {
        step: u64,
        last_good: Box<Checkpoint>,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
