//! Pipeline commands behind the `altq` binary.

pub mod commands;
pub mod config;
pub mod play;

pub use config::RunConfig;

/// Errors with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Env(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Env(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Env(m) => write!(f, "environment error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<altq_core::Error> for CliError {
    fn from(e: altq_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}
