use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },

    #[error("{what} does not match its schema: {source}")]
    Schema { what: String, source: serde_json::Error },

    #[error("{0}")]
    Usage(String),

    #[error("gradient check above {tolerance:e} for {failed:?}")]
    GradCheck { tolerance: f64, failed: Vec<String> },

    #[error(transparent)]
    Model(#[from] scmoe_core::Error),

    #[error(transparent)]
    Sim(#[from] scmoe_sim::SimError),
}

/// What goes to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Read { .. } | CliError::Write { .. } => "io",
            CliError::Schema { .. } => "schema",
            CliError::Usage(_) => "usage",
            CliError::GradCheck { .. } => "gradcheck",
            CliError::Model(_) => "model",
            CliError::Sim(_) => "simulation",
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind(),
            message: self.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Schema { .. } => 2,
            CliError::GradCheck { .. } => 3,
            _ => 1,
        }
    }
}
