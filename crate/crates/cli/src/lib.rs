//! Experiment pipelines behind the `cfm` binary: configuration, checkpoint
//! files, run manifests and one function per subcommand.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 1.
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),
    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint stores parameter {0} twice")]
    NameCollision(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] cfm_core::Error),
    #[error(transparent)]
    Tensor(#[from] cfm_tensor::TensorError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
