use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input size {height}x{width} is not a multiple of {multiple}")]
    Sizing {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid label {0}, expected 0 or 1")]
    InvalidLabel(u8),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
