use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a precondition (shape mismatch, empty input, bad argument).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("index ({d}, {h}, {w}) out of bounds for shape {shape:?}")]
    Bounds {
        d: usize,
        h: usize,
        w: usize,
        shape: [usize; 3],
    },

    /// Malformed container (bad magic, unknown dtype, version mismatch).
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    /// Well-formed container holding invalid values (e.g. a label code outside {0,1,2}).
    #[error("content error: {0}")]
    Content(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
