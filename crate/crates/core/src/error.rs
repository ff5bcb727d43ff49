use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library. Variants map one-to-one onto the CLI's
/// failure classes.
#[derive(Debug, Error)]
pub enum MoeError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("outside function domain: {0}")]
    Domain(String),

    #[error("unsupported capability: {0}")]
    Capability(String),

    #[error("optimization diverged at epoch {epoch}: objective {objective}")]
    Divergence { epoch: usize, objective: f64 },

    #[error("too many diverged replications: {diverged} of {total}")]
    SweepDiverged { diverged: usize, total: usize },

    #[error("construction infeasible: {0}")]
    Construction(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MoeError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        MoeError::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MoeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MoeError>;
