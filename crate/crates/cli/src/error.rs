use std::fmt;

use coca_core::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NO_VALIDATION: i32 = 3;
pub const EXIT_CLASS_MISMATCH: i32 = 4;
pub const EXIT_MISALIGNED: i32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    /// Prefixes the message with the file or step that failed.
    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidRegime(_) | Error::OutOfRange { .. } | Error::BelowTableRange(_) => {
            EXIT_CONFIG
        }
        Error::EmptyValidation => EXIT_NO_VALIDATION,
        Error::ClassCountMismatch(_) => EXIT_CLASS_MISMATCH,
        Error::MisalignedIds(_) => EXIT_MISALIGNED,
        _ => EXIT_OTHER,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}
