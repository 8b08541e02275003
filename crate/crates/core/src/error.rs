use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QuadError>;

/// Failure categories surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum QuadError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<QuadError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QuadError {
    pub fn dim(msg: impl Into<String>) -> Self {
        QuadError::Dimension(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        QuadError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        QuadError::Numerical(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        QuadError::State(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        QuadError::Range(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QuadError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        QuadError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        QuadError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            QuadError::Numerical(_) => true,
            QuadError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
