//! Error taxonomy shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dataset generation, training, crafting, and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (shape mismatch,
    /// infeasible bounds, out-of-range parameter, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss and cannot continue.
    #[error("training failed at epoch {epoch}: {message}")]
    TrainingFailure { epoch: usize, message: String },

    /// A numeric routine hit a non-finite or degenerate value mid-run.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// Underlying filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact is corrupt or has the wrong magic/version.
    #[error("format error: {0}")]
    Format(String),

    /// A run-configuration file or CLI flag failed validation.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
