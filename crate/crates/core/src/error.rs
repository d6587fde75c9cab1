use std::fmt;

/// Row/column extent of a matrix, used in error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("weight entry {value} at ({row}, {col}) is outside the {domain} domain")]
    InvalidWeight {
        domain: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("batch normalization in training mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },

    #[error("{kind} layer has no continuous parameters")]
    NotFloatLayer { kind: &'static str },

    #[error("layer {index} ({kind}) is not supported by {op}")]
    UnsupportedLayer {
        op: &'static str,
        index: usize,
        kind: &'static str,
    },

    #[error("network: {0}")]
    InvalidNetwork(String),

    #[error("loss targets: {0}")]
    InvalidTargets(String),

    #[error("configuration: {0}")]
    InvalidConfig(String),

    #[error("trajectory has no co-states for layer {0}; run the backward pass first")]
    MissingCostates(usize),

    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
