//! Command implementations behind the `deepjoint` binary.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] deepjoint::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 configuration or usage, 3 data, 4 numerical, 5 failed gradient
    /// check, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use deepjoint::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::Data(_) | E::Csv(_) | E::Json(_)) => 3,
            CliError::Core(
                E::Numerical(_)
                | E::NonFinite { .. }
                | E::Domain { .. }
                | E::UndefinedMetric(_)
                | E::Shape(_)
                | E::NonScalarRoot(_),
            ) => 4,
            CliError::GradCheck(_) => 5,
            CliError::Io { .. } | CliError::Core(E::Io(_)) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
