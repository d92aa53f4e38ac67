//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by reduction, attention, scheduling, and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a shape precondition (dimension mismatch, wrong row
    /// count, inconsistent map).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A configuration is internally inconsistent (empty destination set,
    /// schedule referencing a nonexistent layer, reduction factor < 1).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Sensitivity probing is undefined because the base error is zero while
    /// a probed error is not.
    #[error("degenerate probe: base error is zero but layer {layer} probe error is {probe_error}")]
    DegenerateProbe { layer: usize, probe_error: f64 },

    /// A structured document failed to parse. The serde message names the
    /// offending field and position.
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
