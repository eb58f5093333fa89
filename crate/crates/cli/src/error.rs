use std::fmt;

use nvsim_core::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Config does not parse or fails validation.
    Schema,
    Budget,
    /// A fit failed while --strict was set.
    Fit,
    Io,
}

#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Schema, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }

    /// Core error raised while building or running the scenario at `path`.
    pub fn at(path: &str, err: CoreError) -> Self {
        let kind = match err {
            CoreError::BudgetExceeded { .. } => ErrorKind::Budget,
            CoreError::FitFailed(_) => ErrorKind::Fit,
            _ => ErrorKind::Schema,
        };
        let message = if path.is_empty() { err.to_string() } else { format!("{path}: {err}") };
        Self { kind, message }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Schema => 2,
            ErrorKind::Budget => 3,
            ErrorKind::Fit => 4,
            ErrorKind::Io => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        CliError::at("", err)
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::io(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
