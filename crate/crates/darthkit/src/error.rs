//! Shared error type for the toolkit.
//!
//! Structural problems (bad shapes, bad config) are reported as errors at the
//! call site that introduced them. Numeric edge cases that the math defines a
//! value for (empty sets, zero denominators with a stated convention) are not
//! errors; only genuinely undefined inputs are.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array arguments disagree with the documented shapes.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A configuration value is outside its documented domain.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A documented precondition was violated by the caller, e.g. a
    /// contrastive anchor with no positive pair.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input is outside the mathematical domain of the operation,
    /// e.g. a zero-norm embedding fed to a cosine.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A training loss left the finite range; carries the step it happened at.
    #[error("non-finite {component} at step {step}")]
    NonFinite { component: String, step: usize },

    /// A required upstream artifact (checkpoint, dataset) does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// Prediction and ground-truth inputs do not describe the same sequences.
    #[error("mismatched sequences: {0}")]
    MismatchedSequences(String),

    /// Reports being combined do not share a class universe.
    #[error("inconsistent class sets: {0}")]
    InconsistentClasses(String),

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
