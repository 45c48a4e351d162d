use std::path::Path;

use thiserror::Error;

/// Failure of a command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    /// Prefixes the message with where it happened.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Self::Usage(m) => Self::Usage(format!("{ctx}: {m}")),
            Self::Data(m) => Self::Data(format!("{ctx}: {m}")),
            Self::Numerical(m) => Self::Numerical(format!("{ctx}: {m}")),
        }
    }
}

impl From<bcrisk::Error> for CliError {
    fn from(e: bcrisk::Error) -> Self {
        use bcrisk::Error as E;
        match e {
            E::Singular { .. } | E::NonFiniteLoss { .. } | E::UndefinedCindex | E::NoEvents => {
                Self::Numerical(e.to_string())
            }
            _ => Self::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
