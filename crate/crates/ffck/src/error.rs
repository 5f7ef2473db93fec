use thiserror::Error;

/// Errors surfaced by the analysis library.
#[derive(Debug, Error)]
pub enum FfckError {
    /// A numeric precondition was violated (NaN, out-of-range probability, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor dimensions do not line up.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: String,
        got: String,
        context: String,
    },

    /// A caller-supplied value violated an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// A serialized artifact (checkpoint, dataset) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FfckError>;

impl FfckError {
    pub fn dimension(expected: impl ToString, got: impl ToString, context: impl ToString) -> Self {
        FfckError::Dimension {
            expected: expected.to_string(),
            got: got.to_string(),
            context: context.to_string(),
        }
    }
}
