use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("{path}: {msg}")]
    Dataset { path: PathBuf, msg: String },
    #[error("failed to decode image {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("corrupt manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Degenerate(String),
    #[error(transparent)]
    Tensor(#[from] tapegrad::TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
