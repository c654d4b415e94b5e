use thiserror::Error;

/// Errors produced by the tailbalance library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("degenerate filter for class {class}: zero norm cannot be normalized")]
    DegenerateFilter { class: usize },

    #[error("trace unavailable: {0}")]
    UnavailableTrace(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("sweep failed: all {0} trials failed")]
    SweepFailed(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure(msg.into())
    }

    /// True for errors caused by bad input (files, schemas, arguments)
    /// rather than by a run going wrong.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::MalformedFile(_)
                | Error::MalformedRecord { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
