//! IO companion to `kurtq-core`: the binary checkpoint format, CSV/JSON
//! export, JSON experiment configs, and the `kurtq` command implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod export;

use thiserror::Error;

/// Command-level error carrying the process exit code taxonomy:
/// 1 usage/config, 2 numeric failure, 3 I/O or format.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<kurtq_core::Error> for CliError {
    fn from(e: kurtq_core::Error) -> Self {
        match e {
            kurtq_core::Error::Divergence { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
