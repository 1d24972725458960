use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("{op} requires a non-empty input")]
    Empty { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarSeed([usize; 2]),

    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("node {0} has zero degree")]
    ZeroDegree(usize),

    #[error("no candidate objects for meta-predicate {0}")]
    NoCandidates(&'static str),

    #[error("truth value {0} outside [0, 1]")]
    TruthRange(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unknown label {label:?}; expected one of {known:?}")]
    UnknownLabel { label: String, known: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
