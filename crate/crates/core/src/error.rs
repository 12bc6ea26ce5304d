use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the audit library.
#[derive(Debug, Error)]
pub enum AuditError {
    /// Malformed input. `line` is 1-based and counts the header row.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// Input parsed but violates a cross-record constraint.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Arguments outside an operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Exact enumeration refused because the instance is too large.
    #[error("instance too large for exact enumeration: {placements} placements exceeds the bound of {bound}")]
    TooLarge { placements: f64, bound: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error for {path}: {message}")]
    Decode { path: PathBuf, message: String },
}

impl AuditError {
    pub(crate) fn parse(line: u64, message: impl Into<String>) -> Self {
        AuditError::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
