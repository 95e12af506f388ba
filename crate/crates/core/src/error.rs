use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("unknown architecture preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid attack specification: {0}")]
    InvalidAttack(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("corrupted checkpoint: {0}")]
    CorruptedCheckpoint(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Precondition(String),

    #[error("lineage error: {0}")]
    Lineage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Numerical(_) => 3,
            LabError::InvalidConfig(_)
            | LabError::UnknownPreset(_)
            | LabError::InvalidArchitecture(_)
            | LabError::InvalidAttack(_)
            | LabError::Lineage(_) => 1,
            _ => 2,
        }
    }
}
