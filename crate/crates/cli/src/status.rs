use std::fmt;
use std::path::Path;

use gcpa_core::Error;

/// Process exit status, a stable contract for scripts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some items failed; the rest of the output is valid.
    Partial,
    /// Bad arguments, configuration or inputs; nothing useful was produced.
    Usage,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Partial => 1,
            Status::Usage => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            status: Status::Usage,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            status: Status::Partial,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::failure(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Input and configuration problems are usage errors; anything that goes
/// wrong once work is under way is a failure.
impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let status = match err {
            Error::NonFiniteLoss { .. } | Error::Image { .. } | Error::Io { .. } => Status::Partial,
            _ => Status::Usage,
        };
        Self {
            status,
            message: err.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
