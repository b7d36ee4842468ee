use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator and its I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{key}: {message}")]
    Config { key: String, message: String },

    #[error("clearing failed: {0}")]
    Clearing(String),

    #[error("unknown scenario `{name}` (available: {})", available.join(", "))]
    UnknownScenario {
        name: String,
        available: Vec<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Short machine-readable category, used by the CLI for its one-line error report.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config { .. } => "config",
            Error::Clearing(_) => "solver",
            Error::UnknownScenario { .. } => "unknown_scenario",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Parse { .. } => "parse",
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
