//! One error enum for the whole crate.
//!
//! Variants map onto the failure families the modules share: bad caller
//! input, numerical singularities, malformed files, inconsistent stored
//! artifacts, and plain IO. Keeping them in one enum lets the pipeline
//! propagate errors across module boundaries without adapter layers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed in something outside the documented domain
    /// (non-finite values, shape mismatches, out-of-range parameters).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A rotation log was requested inside the singular band around a
    /// half-turn, where twist coordinates are not unique.
    #[error("near-singular rotation: {0}")]
    NearSingularity(String),

    /// Text could not be parsed. Carries a line number when the underlying
    /// reader can attribute one.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The parsed document is well-formed but structurally wrong
    /// (cycles, repeated parents, dangling references).
    #[error("structure error: {0}")]
    Structure(String),

    /// A semantic constraint failed after parsing (missing joint limits,
    /// inconsistent dimensions, bad schema versions).
    #[error("validation error: {0}")]
    Validation(String),

    /// A stored artifact disagrees with what its own contents imply
    /// (for example edge tensors that do not match their node sets).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// An iterative routine failed to make progress (diverging training
    /// loss, denoiser returning non-finite values).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand used throughout the crate.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
