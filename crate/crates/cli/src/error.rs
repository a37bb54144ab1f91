use std::process::ExitCode;

use rvernet_core::Error;

/// A failed command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, configuration or inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running a valid command. Exit code 3.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self::Usage(m.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) | Error::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
