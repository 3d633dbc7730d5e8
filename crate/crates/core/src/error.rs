//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: `Io`,
//! `Format`, and `Manifest` are data problems (bad or missing inputs), the
//! rest are runtime/configuration failures.

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents: WAV encoding, feature container, checkpoint.
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Invalid parameter or option combination.
    #[error("{reason}")]
    Config { reason: String },

    /// Artifacts that cannot be combined: checkpoint/config hash mismatch,
    /// posterior files over different clip sets.
    #[error("{reason}")]
    Incompatible { reason: String },

    #[error("training failed at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        Self::Config {
            reason: reason.into(),
        }
    }

    pub fn incompatible(reason: impl Into<String>) -> Self {
        Self::Incompatible {
            reason: reason.into(),
        }
    }

    /// True for errors caused by unreadable or malformed input data rather
    /// than by the program itself.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Self::Io { .. } | Self::Format { .. } | Self::Manifest { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
