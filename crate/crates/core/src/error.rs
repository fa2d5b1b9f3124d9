use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The variants are grouped so that a front end can map them onto distinct
/// exit codes (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("adapter `{command}` failed: {reason}{}", fmt_stderr(.stderr))]
    Adapter {
        command: String,
        reason: String,
        stderr: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

fn fmt_stderr(stderr: &str) -> String {
    let trimmed = stderr.trim();
    if trimmed.is_empty() {
        String::new()
    } else {
        format!(" (stderr: {trimmed})")
    }
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Argument,
    Data,
    Adapter,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) => ErrorCategory::Argument,
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::Format(_)
            | Error::Shape(_)
            | Error::Dataset(_) => ErrorCategory::Data,
            Error::Adapter { .. } => ErrorCategory::Adapter,
            Error::Numeric(_) => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
