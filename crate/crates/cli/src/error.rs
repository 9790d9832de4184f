use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("computation error: {0}")]
    Computation(#[from] asif_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("threshold violated: {0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Computation(_) | CliError::Io(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parameter errors raised while building scenario components are config errors.
pub(crate) fn building(e: asif_core::Error) -> CliError {
    match e {
        asif_core::Error::Parameter(msg) => CliError::Config(msg),
        other => CliError::Computation(other),
    }
}
