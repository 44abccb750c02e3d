use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("mining exhausted: {0}")]
    MiningExhausted(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDiverged { iteration: u64, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of numerical evaluation (overflow, divergence, non-finite values).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow(_)
                | Error::Evaluation(_)
                | Error::TrainingDiverged { .. }
                | Error::Degenerate(_)
        )
    }

    /// Process exit code: 1 for configuration errors, 3 for numeric failures, 2 for
    /// everything else (bad data, formats, files).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            e if e.is_numeric() => 3,
            _ => 2,
        }
    }
}
