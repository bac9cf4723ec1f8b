use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch-size error: {op} needs at least {min} samples in train mode, got {got}")]
    BatchSize {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schedule error: step {step} outside [0, {total}]")]
    Schedule { step: usize, total: usize },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("checkpoint error at byte offset {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch}); sample indices {samples:?}")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        batch: usize,
        samples: Vec<usize>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
