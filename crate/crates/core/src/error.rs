//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by grammar construction, statistics, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameters violate a documented invariant.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// A token sequence contains a patch outside the grammar's rule tables.
    #[error("undecodable input: {0}")]
    Undecodable(String),

    /// Input dimensions do not match what the operation expects.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// A patch code that is not in the patch set of the given level.
    #[error("unknown patch {patch} at level {level}")]
    UnknownPatch { level: usize, patch: usize },

    /// `|<1, Wx>|` fell below the normalization guard.
    #[error("degenerate normalization at level {level}: |<1, Wx>| = {value:e} below guard")]
    DegenerateNormalization { level: usize, value: f64 },

    /// Gradient descent loss increased over too many consecutive steps.
    #[error("gradient descent diverged: {0}")]
    StepSize(String),

    /// A layerwise training stage failed.
    #[error("training stage for level {level} failed: {source}")]
    StageFailure {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    /// Recovered quadratic support could not be made disjoint.
    #[error("ambiguous support: {0}")]
    AmbiguousSupport(String),

    /// Input outside the function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Refused to serialize an empty result set.
    #[error("empty result")]
    EmptyResult,

    /// An operation that needs a fitted model got none.
    #[error("undefined model: {0}")]
    UndefinedModel(String),

    /// Malformed or schema-violating serialized input.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
