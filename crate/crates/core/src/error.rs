use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("step index {t} out of range 1..={max}")]
    Index { t: usize, max: usize },

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("chain {chain} diverged at step t={step}: {reason}")]
    DivergedChain {
        step: usize,
        chain: usize,
        reason: String,
    },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    TrainingDiverged { iteration: usize, loss: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DivergedChain { .. } | Error::TrainingDiverged { .. } => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::DivergedChain { .. } | Error::TrainingDiverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
