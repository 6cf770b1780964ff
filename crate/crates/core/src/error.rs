use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("sample {index}: truncated payload ({found} of {expected} bytes)")]
    Truncated {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("sample {index}: checksum mismatch")]
    Checksum { index: usize },

    #[error("malformed record {index}: {reason}")]
    Malformed { index: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, bad files) rather
    /// than an internal failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::Dimension { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
