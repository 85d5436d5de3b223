//! Library side of the `bvr` binary. Every subcommand is a plain function so
//! tests can drive it without spawning a process.

mod commands;
mod config;

pub use commands::*;
pub use config::*;

use bvr_core::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::Numeric { .. } | Error::Contract(_) => CliError::Numeric(e.to_string()),
            Error::Format(_) | Error::Io(_) | Error::Json(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
