use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("decode error at byte {offset}: {message}")]
    Decode { offset: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in tensor {tensor} (example {example})")]
    NonFinite { example: usize, tensor: &'static str },

    #[error("model dims mismatch: expected F={expected_f} D={expected_d}, found F={found_f} D={found_d}")]
    DimMismatch {
        expected_f: usize,
        expected_d: usize,
        found_f: usize,
        found_d: usize,
    },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
