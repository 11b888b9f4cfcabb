//! Command-line driver: layered configuration, subcommands and exit codes.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{digest, run, AblationKind, Command};
pub use config::{RunConfig, Settings};
pub use error::{CliError, CliResult, Kind};
