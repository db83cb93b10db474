use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid step size {0} (must be positive and finite)")]
    StepSize(f64),

    #[error("invalid blocking schedule: {0}")]
    Schedule(String),

    #[error("forecast exhausted: step {step} with horizon {horizon} needs {needed} samples, series has {available}")]
    Horizon {
        step: usize,
        horizon: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("invalid model:\n  {}", .0.join("\n  "))]
    Model(Vec<String>),

    #[error("closed loop aborted at step {step}: {reason}")]
    ClosedLoop { step: usize, reason: String },

    #[error("cannot compare logs: {0}")]
    Comparison(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
