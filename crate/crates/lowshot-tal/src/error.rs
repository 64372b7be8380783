//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by loading, validation, and model operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// A file, config value, or data structure violates its contract.
    #[error("validation error: {0}")]
    Validation(String),

    /// Shape or byte-count mismatch between declared and actual data.
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    /// A config key is out of its legal range.
    #[error("config key {key} out of range: {message}")]
    ConfigRange { key: String, message: String },

    /// Something went wrong mid-computation (NaN loss, token overflow, ...).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Error::Runtime(message.into())
    }

    /// True for errors a user can fix by correcting inputs (exit code 1);
    /// false for internal/runtime failures (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::DimMismatch { .. }
                | Error::ConfigRange { .. }
                | Error::Parse { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
