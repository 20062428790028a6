use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unknown graph node {0}")]
    UnknownNode(usize),

    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("parameter index {index} out of range for {total} parameters")]
    IndexOutOfRange { index: usize, total: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("KL divergence is infinite: q[{index}] = 0 where p[{index}] > 0")]
    ZeroSupport { index: usize },

    #[error("invalid distribution batch: {0}")]
    Distribution(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("invalid training config: {0}")]
    TrainConfig(String),

    #[error("prune ratio {0} outside [0, 1]")]
    PruneRatio(f64),

    #[error("prune ratios must be strictly increasing and start at 0: {0:?}")]
    RatioOrder(Vec<f64>),

    // The cause is rendered inline rather than chained, so a one-line
    // diagnostic does not repeat it.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("run comparison: {0}")]
    Compare(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
