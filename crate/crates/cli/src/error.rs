use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] ztt_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration and usage problems, 3 when
    /// training diverges, 4 for checkpoint format or version mismatches and 1
    /// for anything else.
    pub fn exit_code(&self) -> i32 {
        use ztt_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint { source, .. } => match source {
                CheckpointError::BadMagic | CheckpointError::UnsupportedVersion(_) => 4,
                _ => 1,
            },
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::NonFinite(_) => 3,
                E::Config(_) | E::Usage(_) | E::Conversion(_) => 2,
                _ => 1,
            },
        }
    }
}
