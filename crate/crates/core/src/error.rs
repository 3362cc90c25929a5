use std::io;

use thiserror::Error;

/// Errors raised across the engine.
///
/// The variants map onto the failure classes the CLI reports: `Config` and
/// `Argument` are caller mistakes, `Integrity` means an internal invariant
/// was broken (bookkeeping mismatch, duplicate coordinates, missing trace).
#[derive(Debug, Error)]
pub enum SstError {
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SstError {
    /// True for failures caused by bad input rather than broken invariants.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            SstError::Config(_) | SstError::Argument(_) | SstError::Domain(_) | SstError::Format(_) | SstError::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, SstError>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::SstError::Config(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::SstError::Argument(format!($($arg)*)) };
}
macro_rules! integrity_err {
    ($($arg:tt)*) => { $crate::error::SstError::Integrity(format!($($arg)*)) };
}

pub(crate) use arg_err;
pub(crate) use config_err;
pub(crate) use integrity_err;
