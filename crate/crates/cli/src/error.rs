use std::path::Path;

use thiserror::Error;

/// Failure of one command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    /// A gradient check exceeded its tolerance.
    #[error("{0}")]
    Gradcheck(String),
    #[error("{0}")]
    Io(String),
    /// Any other library error.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Gradcheck(_) => 4,
            CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numeric(_) => "numeric",
            CliError::Gradcheck(_) => "gradcheck",
            CliError::Io(_) => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// `error kind=<kind> exit=<code> message="<escaped>"` on one line.
    pub fn line(&self) -> String {
        format!("error kind={} exit={} message={:?}", self.kind(), self.exit_code(), self.to_string())
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<flexkernel::Error> for CliError {
    fn from(e: flexkernel::Error) -> Self {
        match e {
            flexkernel::Error::Numeric { .. } => CliError::Numeric(e.to_string()),
            flexkernel::Error::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
