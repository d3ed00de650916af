//! Driver behind the `gsnet` binary: run settings and the subcommands.

pub mod commands;
pub mod config;

use config::UsageError;

/// A usage error exits with status 2, anything else with 1.
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<gsnet_core::Error> for CliError {
    fn from(e: gsnet_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

