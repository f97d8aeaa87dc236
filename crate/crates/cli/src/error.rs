use gatedunipose::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// A checked property or metric did not hold.
    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                Error::Config { .. }
                | Error::Parse { .. }
                | Error::Usage(_)
                | Error::InvalidSpec(_)
                | Error::Io(_) => 2,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;
