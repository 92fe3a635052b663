//! Library behind the `swirl` binary: config parsing, the four pipeline
//! commands, and the provenance manifest.

pub mod commands;
pub mod config;
pub mod manifest;

use swirl_core::SwirlError;

/// Command outcomes map to stable exit codes: 2 config error, 3 data error,
/// 4 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<SwirlError> for CliError {
    fn from(err: SwirlError) -> Self {
        match err {
            SwirlError::Numerical(msg) => CliError::Numerical(msg),
            SwirlError::InvalidInput(msg) | SwirlError::InvalidModel(msg) => {
                CliError::Config(msg)
            }
            other => CliError::Data(other.to_string()),
        }
    }
}
