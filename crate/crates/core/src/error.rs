use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{path}: row {row}: {msg}")]
    Data {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid gradient check: {0}")]
    InvalidCheck(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("input file not found: {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}
