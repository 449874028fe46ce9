use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in op #{node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("loss node must be a scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("masked token at position {position}, depth {depth} inside requested range")]
    MaskedToken { position: usize, depth: usize },

    #[error("depth-suffix invariant violated at position {0}")]
    DepthSuffix(usize),

    #[error("{what}: expected {expected}, found {found}")]
    Format {
        what: String,
        expected: String,
        found: String,
    },

    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: u64, dump: String },

    #[error("degenerate covariance (min eigenvalue {min_eig:e}, condition number {condition:e})")]
    DegenerateCovariance { min_eig: f64, condition: f64 },

    #[error("{path}: {source}")]
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

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
