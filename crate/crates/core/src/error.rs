use thiserror::Error;

/// Failure of a single fitness evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("budget vector has {actual} layers, evaluator expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("evaluator returned a non-finite score ({0})")]
    NonFinite(f64),

    #[error("evaluator did not answer request {id} within {seconds} s")]
    Timeout { id: u64, seconds: f64 },

    #[error("evaluator process exited: {0}")]
    ProcessExited(String),

    #[error("malformed evaluator message: {0}")]
    Malformed(String),

    #[error("evaluator reported an error for request {id}: {message}")]
    Remote { id: u64, message: String },

    #[error("evaluator i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("evaluation failed in group {group} generation {generation}: {source}")]
    Evaluation {
        group: usize,
        generation: usize,
        #[source]
        source: EvalError,
    },

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-greppable code used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "E_ARG",
            Error::Evaluation { .. } | Error::Eval(_) => "E_EVAL",
            Error::Io(_) => "E_IO",
            Error::Json(_) | Error::Csv(_) => "E_PARSE",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
