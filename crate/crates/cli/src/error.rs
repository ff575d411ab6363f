use std::fmt;
use std::process::ExitCode;

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input (exit 2).
    Input(String),
    /// Well-formed input the operation cannot accept (exit 3).
    Domain(String),
    /// A verification check failed (exit 4).
    Verification(String),
}

impl CliError {
    pub fn code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Input(_) => 2,
            CliError::Domain(_) => 3,
            CliError::Verification(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Domain(m) => write!(f, "error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

pub fn input(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

pub fn domain(e: impl fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

pub type CliResult<T = ()> = Result<T, CliError>;
