//! Command-line driver: run configuration files, the checkpoint format and
//! the `train`, `eval`, `generate`, `sweep` and `retrofit` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;
