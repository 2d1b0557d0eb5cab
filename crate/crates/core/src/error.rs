use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid element {id}: {message}")]
    Validation { id: u64, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate BEV plane: |n_z| = {n_z:e} < 1e-6")]
    DegeneratePlane { n_z: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegeneratePlane { .. } => "degenerate_plane",
            Error::Shape(_) => "shape",
            Error::Sampling(_) => "sampling",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
