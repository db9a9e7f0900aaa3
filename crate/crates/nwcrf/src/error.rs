use std::io;

use crate::checkpoint::CheckpointError;
use crate::netpbm::NetpbmError;

/// Failure of a command; the variant decides the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("property check failed: {0}")]
    Check(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { key: key.into(), message: message.into() }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Check(_) => 5,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<nwcrf_core::Error> for CliError {
    fn from(e: nwcrf_core::Error) -> Self {
        match e {
            nwcrf_core::Error::Numeric { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<NetpbmError> for CliError {
    fn from(e: NetpbmError) -> Self {
        CliError::Input(e.to_string())
    }
}
