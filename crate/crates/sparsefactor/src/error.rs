use std::fmt;

use sparsefactor_core::Error as CoreError;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or inconsistent options (exit 2).
    Usage(String),
    /// Unreadable, malformed or degenerate input (exit 3).
    Data(String),
    /// Numerical breakdown during estimation (exit 4).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let text = e.to_string();
        let mut root = &e;
        while let CoreError::PathCell { source, .. } = root {
            root = source;
        }
        match root {
            CoreError::InvalidParameter(_) => CliError::Usage(text),
            CoreError::InvalidData(_)
            | CoreError::InsufficientData(_)
            | CoreError::DimensionMismatch { .. }
            | CoreError::DegenerateVariance { .. } => CliError::Data(text),
            _ => CliError::Numerical(text),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
