use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AptError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("checkpoint error ({path}): {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing prerequisite {what}; run `aptbench {command}` first")]
    MissingPrerequisite { what: String, command: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("output already exists at {0}; pass --force to overwrite")]
    OutputExists(PathBuf),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl AptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AptError::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class failures map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            AptError::Config(_)
                | AptError::InvalidArgument(_)
                | AptError::MissingPrerequisite { .. }
                | AptError::OutputExists(_)
                | AptError::Dataset(_)
        )
    }
}

impl From<serde_json::Error> for AptError {
    fn from(e: serde_json::Error) -> Self {
        AptError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AptError>;
