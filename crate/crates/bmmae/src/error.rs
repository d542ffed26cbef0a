//! Errors surfaced by IO, pipelines and the CLI, with their exit codes.

use std::path::PathBuf;

use bmmae_core::error::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Distinct failure modes when reading a dataset directory.
#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("malformed sidecar {path}: {message}")]
    MalformedSidecar { path: PathBuf, message: String },
    #[error("blob {path} has {actual} bytes, sidecar shape implies {expected}")]
    TruncatedBlob {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("unknown modality `{name}` in {path}")]
    UnknownModality { path: PathBuf, name: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("malformed manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },
    #[error("params.bin has {actual} bytes, manifest describes {expected}")]
    BlobMismatch { expected: u64, actual: u64 },
    #[error("unknown parameter `{0}` in checkpoint")]
    UnknownParameter(String),
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParameter(String),
    #[error("width mismatch for `{name}`: checkpoint {found:?}, model expects {expected:?}")]
    WidthMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint model config is incompatible: {0}")]
    ConfigMismatch(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Dataset(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Checkpoint(
                CheckpointError::WidthMismatch { .. } | CheckpointError::ConfigMismatch(_),
            ) => 2,
            Error::Checkpoint(_) => 3,
            Error::Core(e) => match e {
                CoreError::Config(_) | CoreError::Plan(_) => 2,
                _ => 3,
            },
        }
    }
}
