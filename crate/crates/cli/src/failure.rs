use std::fmt;
use std::path::Path;

use vcr_core::Error;

/// Exit codes are part of the command-line contract.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_COMPAT: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    pub fn compat(message: impl Into<String>) -> Self {
        Self { code: EXIT_COMPAT, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attaches a path and an exit code to a library error.
pub trait Context<T> {
    fn or_exit(self, code: u8, path: &Path) -> CliResult<T>;
}

impl<T> Context<T> for Result<T, Error> {
    fn or_exit(self, code: u8, path: &Path) -> CliResult<T> {
        self.map_err(|e| Failure {
            code,
            message: format!("{}: {e}", path.display()),
        })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn or_exit(self, code: u8, path: &Path) -> CliResult<T> {
        self.map_err(|e| Failure {
            code,
            message: format!("{}: {e}", path.display()),
        })
    }
}
