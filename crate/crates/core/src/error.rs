use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("degenerate vector (norm {norm:e}) in cosine")]
    DegenerateVector { norm: f64 },

    #[error("malformed tensor file at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("unsupported dtype {dtype} for tensor {name}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor pairing failed for layer {key}: {reason}")]
    Pairing { key: String, reason: String },

    #[error("invalid layer {key}: {reason}")]
    InvalidLayer { key: String, reason: String },

    #[error("models share no compatible layers")]
    EmptyOverlap,

    #[error("layer {key} has content delta {content:?} but style delta {style:?}")]
    ShapeMismatch {
        key: String,
        content: Vec<usize>,
        style: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
