//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("node {0} depends on an unbound placeholder leaf")]
    UnboundLeaf(usize),

    #[error("node {0} is not a placeholder and cannot be bound")]
    NotAPlaceholder(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no active task families")]
    NoActiveFamilies,

    #[error("permutation of length {got} does not match dataset of length {want}")]
    PermutationMismatch { got: usize, want: usize },

    #[error("inner adaptation produced a non-finite loss at step {step}")]
    NonFiniteInnerLoss { step: usize },

    #[error("non-finite meta-gradient (global norm {norm}) at parameter '{param}'")]
    NonFiniteMetaGradient { param: String, norm: f64 },

    #[error("task from family '{family}' failed: {source}")]
    TaskFailure {
        family: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parameter vector has length {got}, expected {want}")]
    ParamLength { got: usize, want: usize },

    #[error("missing parameter tensor '{0}'")]
    MissingParam(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("output directory is locked by another run: {0}")]
    OutputLocked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;
