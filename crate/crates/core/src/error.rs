use std::io;

use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum LabError {
    /// Invalid user-supplied configuration (bad sizes, bad grids, bad flags).
    #[error("configuration error: {0}")]
    Config(String),
    /// Arguments whose shapes or counts do not fit together.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Non-finite loss, gradient or parameter; the run must stop.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Malformed persisted data (probe files, logs).
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::LabError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
