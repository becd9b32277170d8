//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both offending shapes.
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Input outside the operation's domain (e.g. normalizing a zero vector).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A forward pass produced NaN or Inf from finite inputs.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An operation was called on an empty collection it cannot handle.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Configuration or spec field out of its declared range.
    #[error("validation error: {0}")]
    Validation(String),

    /// A split left one side without both bag classes.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// Training requires both bag classes.
    #[error("single-class input: {0}")]
    SingleClass(String),

    /// Metric undefined on the given input (e.g. AUC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed binary or text artifact on disk.
    #[error("format error in {file} at offset {offset}: {message}")]
    Format {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    /// Caller broke an operation's stated precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Error from a pipeline phase, tagged with iteration and phase.
    #[error("iteration {iteration}, phase {phase}: {source}")]
    Phase {
        iteration: usize,
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn in_phase(self, iteration: usize, phase: &str) -> Self {
        Error::Phase {
            iteration,
            phase: phase.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors a user can fix by correcting inputs; the CLI maps
    /// these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Format { .. }
                | Error::Stratification(_)
                | Error::DegenerateInput(_)
        )
    }
}
