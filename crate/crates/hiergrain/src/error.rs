//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants are
//! grouped by the layer that raises them: label-tree parsing, tensor and
//! graph operations, decision rules, metrics, dataset I/O, and training.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // Label-tree construction and lookups.
    #[error("tree has no leaves")]
    EmptyTree,
    #[error("leaf path {path:?} on line {line} has depth {depth}, expected {expected}")]
    InconsistentDepth {
        path: String,
        line: usize,
        depth: usize,
        expected: usize,
    },
    #[error("duplicate leaf path {path:?} on line {line}")]
    DuplicateLeaf { path: String, line: usize },
    #[error("{what} index {index} out of range for size {bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    // Tensor and graph operations.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("batch normalization requires at least 2 rows in training mode, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward already consumed this graph")]
    DoubleBackward,
    #[error("target row {row} is not a probability distribution: {detail}")]
    InvalidTarget { row: usize, detail: String },
    #[error("non-finite gradient for parameter {name:?}")]
    NonFiniteGradient { name: String },

    // Distance/effective-cost matrices and decision rules.
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("input is not a probability distribution: {detail}")]
    InvalidDistribution { detail: String },
    #[error("invalid hyperparameter {name}: {detail}")]
    InvalidHyperparameter { name: &'static str, detail: String },

    // Objective assembly.
    #[error("sample {sample}: level-{level} label is not the ancestor of its leaf label")]
    LabelInconsistency { sample: usize, level: usize },

    // Metrics.
    #[error("{left_name} has {left} entries but {right_name} has {right}")]
    LengthMismatch {
        left_name: &'static str,
        left: usize,
        right_name: &'static str,
        right: usize,
    },
    #[error("metric input is empty")]
    EmptyInput,
    #[error("invalid k={k} for {classes} classes: {detail}")]
    BadK {
        k: usize,
        classes: usize,
        detail: String,
    },
    #[error("no mistaken samples, histogram is undefined")]
    NoMistakes,

    // Dataset generation and serialization.
    #[error("invalid dataset spec: {detail}")]
    InvalidSpec { detail: String },
    #[error("{path}:{line}: {detail}")]
    FormatViolation {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("artifact was built for tree {actual}, expected tree {expected}")]
    FingerprintMismatch { expected: String, actual: String },

    // Training.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    // Configuration and I/O plumbing.
    #[error("configuration error: {detail}")]
    Config { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line interface.
    ///
    /// 2 = usage or validation error, 3 = I/O error, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. } => 4,
            _ => 2,
        }
    }
}
