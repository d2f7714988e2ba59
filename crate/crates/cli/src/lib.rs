//! Library side of the `hoca` binary: configuration, file formats and the
//! subcommands themselves.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod report;

use hoca_core::HocaError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] HocaError),
}

impl CliError {
    /// 2 for bad input, 3 for file problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(HocaError::Config(_) | HocaError::Argument(_)) => 2,
            CliError::Core(HocaError::Io(_) | HocaError::Format(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}
