use std::fmt;
use std::process::ExitCode;

use swsg_core::Error;

/// Failure of a command, carrying its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments (exit 1).
    Validation(String),
    /// A solver or oracle check failed (exit 2).
    Solver(String),
    /// A study finished with some failed rows (exit 3).
    Partial(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Validation(_) => 1,
            Failure::Solver(_) => 2,
            Failure::Partial(_) => 3,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid configuration: {m}"),
            Failure::Solver(m) => write!(f, "solver failure: {m}"),
            Failure::Partial(m) => write!(f, "partial study: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid { .. } | Error::Parse(_) | Error::MassMismatch(..) => Failure::Validation(e.to_string()),
            Error::Io(_) => Failure::Solver(e.to_string()),
            _ => Failure::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Solver(format!("i/o: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
