//! CLI-level error type with fixed process exit codes.

use std::fmt;

use vlp_core::CoreError;

/// Exit codes: 0 success, 1 validation error, 2 numeric abort (NaN),
/// 3 I/O error.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, malformed config, contract violations.
    Validation(String),
    /// Non-finite loss or gradients; names the offending tensor/step.
    Numeric(String),
    /// File system failures; carries the path.
    Io(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match e {
            CoreError::NonFinite(name) => CliError::Numeric(format!("non-finite value in {name}")),
            other => CliError::Validation(other.to_string()),
        }
    }
}
