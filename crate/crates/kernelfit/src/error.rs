use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the kernelfit library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("cannot encode {path}: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("image dimensions mismatch: {0}x{1}x{2} vs {3}x{4}x{5}")]
    DimensionMismatch(usize, usize, usize, usize, usize, usize),

    #[error("invalid image geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite sample encountered in {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("parameter map does not match spec: {0}")]
    MapMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset: no readable images in {0}")]
    EmptyDataset(PathBuf),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
