use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("unsupported NIfTI datatype code {0} (only float32 and int16 are read)")]
    UnsupportedDatatype(i16),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error(
        "edge fraction {achieved:.4} still below target {target:.4} after {iterations} threshold steps"
    )]
    Convergence {
        target: f64,
        achieved: f64,
        iterations: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
