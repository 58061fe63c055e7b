use geo_erasure::Error;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad or missing input; exit 2.
    Config(String),
    /// The scoring backend failed; exit 3.
    Backend(String),
    /// Anything else; exit 1.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match &err {
            Error::PartialFailure { failed } => {
                let list: Vec<String> = failed.iter().map(|(p, e)| format!("  {p:?}: {e}")).collect();
                CliError::Backend(format!(
                    "{} prompt(s) failed to score:\n{}",
                    failed.len(),
                    list.join("\n")
                ))
            }
            Error::Scoring(_) => CliError::Backend(err.to_string()),
            Error::Schema { .. }
            | Error::Validation(_)
            | Error::Contract(_)
            | Error::Template(_)
            | Error::Split(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Toml(_) => CliError::Config(err.to_string()),
            Error::DivisionByZero { .. } | Error::Domain(_) | Error::Normalization(_) => {
                CliError::Other(err.to_string())
            }
        }
    }
}
