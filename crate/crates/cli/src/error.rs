use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// Malformed or invalid config, unreadable input.
    pub const BAD_INPUT: u8 = 1;
    /// A round could not be completed.
    pub const UNRECOVERABLE: u8 = 2;
    /// A self-check or replay comparison failed.
    pub const CHECK_FAILED: u8 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    Config {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("unrecoverable fault: {0}")]
    Unrecoverable(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Invalid { .. } | CliError::Io { .. } => exit::BAD_INPUT,
            CliError::Unrecoverable(_) => exit::UNRECOVERABLE,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
        }
    }
}

/// Parses a JSON config, reporting syntax and schema errors with their line
/// and column.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn invalid(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Invalid {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
