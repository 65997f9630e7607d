//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or extents.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Argument outside its valid range.
    #[error("domain error: {0}")]
    Domain(String),
    /// Spatial layout violation (non-square input, indivisible side, ...).
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset layout or content problem.
    #[error("data error: {0}")]
    Data(String),
    /// Malformed container file (bad magic, version, shape, truncation).
    #[error("format error: {0}")]
    Format(String),
    /// Non-finite value where a finite one is required.
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for validation problems, 2 for
    /// runtime/data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 1,
            _ => 2,
        }
    }
}
