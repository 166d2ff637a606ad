use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HailError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HailError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus is empty after filtering generators with fewer than {min_seq_len} records")]
    EmptyCorpus { min_seq_len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("numeric fault: {0}")]
    Numeric(String),
    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl HailError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HailError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        HailError::Contract(msg.into())
    }
}
