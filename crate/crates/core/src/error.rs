use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero expected count in bin {bin} with {count} observed counts")]
    ZeroExpectation { bin: usize, count: f64 },

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite {}: {reason}", path.display())]
    MissingPrerequisite { path: PathBuf, reason: String },

    #[error("bad file format in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::NonFinite { .. } | Error::ZeroExpectation { .. } => 3,
            _ => 1,
        }
    }
}
