//! Error type shared across the crate.
//!
//! Variants are grouped by how the command-line tool reports them: bad
//! invocations and bad configs exit with 1, unreadable or malformed data
//! files with 2, and numerical failures (non-finite losses, eigensolver
//! breakdown) with 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or invalid combination of options.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed (divergence, non-convergence, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status used by the command-line frontend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
