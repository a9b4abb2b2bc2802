use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid network spec at layer {layer}: {msg}")]
    Spec { layer: String, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: bad magic number at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        offset: usize,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated at offset {offset}: needed {needed} more bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },

    #[error("count mismatch at offset {offset}: {images} images but {labels} labels")]
    CountMismatch {
        offset: usize,
        images: usize,
        labels: usize,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("prune refused: layer {layer} would be left with zero width")]
    EmptyLayer { layer: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
