//! Crate-wide error type with exit-code categories for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments, malformed config, unparseable flags.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent input data (corpus lines, checkpoints, vocab files).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values, shape mismatches, failed numerical checks.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numerical(_) => 4,
        }
    }

    pub fn code_name(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Data(_) | Error::Io(_) | Error::Json(_) => "data",
            Error::Numerical(_) => "numerical",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
