use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<bxl1_core::Error> for CliError {
    fn from(e: bxl1_core::Error) -> Self {
        use bxl1_core::Error as E;
        match e {
            E::Dimension { .. } | E::Parameter(_) | E::Unsupported(_) => {
                CliError::Config(e.to_string())
            }
            E::Format(_) | E::Io(_) => CliError::Io(e.to_string()),
            E::Invariant(_) => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
