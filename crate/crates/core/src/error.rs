// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("value matrices have different shapes: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite entry encountered")]
    NonFinite,

    #[error("empty input")]
    Empty,

    #[error("vector norm below zero tolerance")]
    ZeroNorm,

    #[error("input vector {index} is linearly dependent on its predecessors")]
    LinearlyDependent { index: usize },

    #[error("target concept {index} is linearly dependent on earlier targets at token position {position}")]
    LinearlyDependentConcepts { position: usize, index: usize },

    #[error("gram matrix is numerically singular (condition estimate {condition:e})")]
    SingularGram { condition: f64 },

    #[error("covariance matrix is not symmetric")]
    NotSymmetric,

    #[error("prompt contains no words")]
    PromptTooShort,

    #[error("prompt has {words} words but at most {max} fit")]
    PromptTooLong { words: usize, max: usize },

    #[error("token sequence has no content token")]
    NoContentToken,

    #[error("axis token {axis} does not fit an embedding of dimension {dim}")]
    AxisOutOfRange { axis: u32, dim: usize },

    #[error("embedding provenance is {found}, expected {expected}")]
    WrongProvenance {
        expected: &'static str,
        found: &'static str,
    },

    #[error("target basis was built with a different value projector than this layer")]
    BasisLayerMismatch,

    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("invalid shift configuration: {0}")]
    InvalidShift(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
