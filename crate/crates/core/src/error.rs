use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic { what: &'static str, expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, expected: u32, found: u32 },

    #[error("truncated {what}: {detail}")]
    Truncated { what: &'static str, detail: String },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("weight {name}: expected shape {expected:?}, found {found:?}")]
    DimensionMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("missing weight tensor {0}")]
    MissingWeight(String),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image decode error for {path}: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },

    #[error("no admissible images in {dir} (min dimension {min_dim})")]
    EmptyDataset { dir: PathBuf, min_dim: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
