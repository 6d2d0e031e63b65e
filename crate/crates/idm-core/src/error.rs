use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, IdmError>;

#[derive(Debug, Error)]
pub enum IdmError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error at {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged at iteration {iter}: {report}")]
    Diverged { iter: usize, report: String },

    #[error(
        "selection returned no samples for {0} consecutive iterations; \
         recalibrate lambda_ent / lambda_sim for this domain"
    )]
    SelectionStalled(usize),
}

impl IdmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingest(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        IdmError::Ingest {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
