use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The direction handed to the ball projection is numerically zero; the
    /// caller decides whether to skip the perturbation for this batch.
    #[error("gradient norm {norm:e} below zero-gradient threshold {threshold:e}")]
    ZeroGradient { norm: f64, threshold: f64 },

    #[error("backward requires a scalar root node, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("node {0} was not recorded on this tape")]
    UnrecordedNode(usize),

    #[error("target class {class} outside range 0..{num_classes}")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("instance weights must be nonnegative, got {0}")]
    NegativeWeight(f64),

    #[error(
        "batch size {n} exceeds the per-instance oracle cap {cap}; \
         reduce the batch size or pick a cheaper mode"
    )]
    OracleCapExceeded { n: usize, cap: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}:{line}: {msg}")]
    CsvParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
