use std::fmt;

use thiserror::Error;

/// Row/column shape of a dense tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("non-finite loss at batch {batch}: {detail}")]
    Numerical { batch: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) => 2,
            Error::Ingestion(_) | Error::Format(_) | Error::Vocabulary { .. } | Error::Io(_) => 3,
            Error::Numerical { .. } | Error::Domain { .. } | Error::Dimension { .. } => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
