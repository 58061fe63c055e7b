use thiserror::Error;

use crate::scoring::ScoringError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A data file row that does not fit the expected schema.
    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// Inputs that violate an operation's contract (mismatched candidate
    /// sets, empty ranges, out-of-range parameters).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("division by zero: predicted probability of {country} is 0")]
    DivisionByZero { country: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("split error: {0}")]
    Split(String),

    #[error(transparent)]
    Scoring(#[from] ScoringError),

    /// Some prompts could not be scored; every failure is listed.
    #[error("{} prompt(s) failed to score: {}", failed.len(), summarize_failures(failed))]
    PartialFailure { failed: Vec<(String, ScoringError)> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn summarize_failures(failed: &[(String, ScoringError)]) -> String {
    failed
        .iter()
        .map(|(prompt, err)| format!("{prompt:?} ({err})"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
