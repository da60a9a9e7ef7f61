//! Error type and the numeric return-code convention shared by every action.

use std::fmt;

/// Numeric return codes used across the CLI, the action envelope and the
/// library API. `0` is success; anything greater is a failure whose class
/// is identified by the code.
pub mod code {
    /// Success.
    pub const OK: u32 = 0;
    /// Generic failure (bad input, malformed document, conflict).
    pub const GENERIC: u32 = 1;
    /// Unknown module or action.
    pub const UNKNOWN: u32 = 4;
    /// Entry not found.
    pub const NOT_FOUND: u32 = 8;
    /// IO or permission failure.
    pub const IO: u32 = 16;
    /// Dependency resolution failure.
    pub const DEPENDENCY: u32 = 32;
    /// Build or run failure.
    pub const EXEC: u32 = 64;
}

/// A failure carrying one of the codes from [`code`] plus a message.
#[derive(Debug, Clone, thiserror::Error)]
pub struct Error {
    pub code: u32,
    pub message: String,
}

impl Error {
    pub fn new(code: u32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn generic(message: impl Into<String>) -> Self {
        Self::new(code::GENERIC, message)
    }

    pub fn unknown(message: impl Into<String>) -> Self {
        Self::new(code::UNKNOWN, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(code::NOT_FOUND, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(code::IO, message)
    }

    pub fn dependency(message: impl Into<String>) -> Self {
        Self::new(code::DEPENDENCY, message)
    }

    pub fn exec(message: impl Into<String>) -> Self {
        Self::new(code::EXEC, message)
    }

    /// Wrap an IO error with the path that caused it.
    pub fn io_at(path: &std::path::Path, err: std::io::Error) -> Self {
        Self::io(format!("{}: {}", path.display(), err))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (code {})", self.message, self.code)
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        let code = match err.kind() {
            std::io::ErrorKind::NotFound => code::NOT_FOUND,
            _ => code::IO,
        };
        Self::new(code, err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Self::generic(format!("malformed JSON: {err}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
