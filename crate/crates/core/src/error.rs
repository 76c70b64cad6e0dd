use std::path::PathBuf;

use icct_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{field}: {msg}")]
    Config { field: String, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("node {node}: dominant weight is zero, predicate is degenerate")]
    DegeneratePredicate { node: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("no leaf has enough visits to estimate its entropy")]
    NoVisitedLeaves,
    #[error("collision: gap {gap:.3} m")]
    Collision { gap: f64 },
    #[error("unknown {what} '{name}'")]
    Unknown { what: &'static str, name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
