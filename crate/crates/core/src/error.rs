use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("tensor of shape {shape:?} needs {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { index: usize, value: f64 },

    #[error("index {index} out of range in {op} (length {len})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("every expert is masked")]
    AllMasked,

    #[error("the {0} estimator needs a dense routing context (all expert outputs)")]
    MissingDenseContext(&'static str),

    #[error("invalid estimator configuration: {0}")]
    InvalidEstimator(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("oracle intractable: {0}")]
    Intractable(String),

    #[error("{got} Monte Carlo samples requested, at least {min} required")]
    TooFewSamples { got: usize, min: usize },

    #[error("load-balance loss needs a non-empty batch")]
    EmptyBatch,

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
