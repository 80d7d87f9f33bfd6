//! Config ingestion, experiment drivers, and trace export for the
//! `powertrack` binary. Lives as a library so integration tests can
//! drive the exact code paths the binary runs.

pub mod commands;
pub mod config;
pub mod trace;

pub use commands::{cmd_diagnose, cmd_oracle, cmd_selftest, cmd_simulate, Overrides};
pub use config::{load_config, parse_config, Config};

/// Failure classes, each mapped to a distinct process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable, unparsable, or invalid configuration. Exit code 1.
    #[error("config error: {0}")]
    Config(String),
    /// The run itself failed. Exit code 2.
    #[error("runtime error: {0}")]
    Runtime(String),
    /// A self-test check failed. Exit code 3.
    #[error("self-test failure: {0} check(s) failed")]
    Selftest(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Selftest(_) => 3,
        }
    }
}

impl From<powertrack_core::Error> for CliError {
    fn from(e: powertrack_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
