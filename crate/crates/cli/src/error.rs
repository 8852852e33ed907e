use std::io;
use std::path::Path;

use climprobe::CoreError;

/// Failure reported as one JSON line on stderr; `code` is the exit status.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: i32,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;
pub const EXIT_INVALID: i32 = 5;
pub const EXIT_IO: i32 = 6;
pub const EXIT_DIVERGED: i32 = 7;
pub const EXIT_INPUT_CHANGED: i32 = 8;

impl CliError {
    pub fn new(kind: &'static str, code: i32, message: impl Into<String>) -> Self {
        CliError {
            kind,
            code,
            message: message.into(),
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::new("usage", EXIT_USAGE, m)
    }

    pub fn invalid(m: impl Into<String>) -> Self {
        Self::new("invalid_argument", EXIT_INVALID, m)
    }

    pub fn incompatible(m: impl Into<String>) -> Self {
        Self::new("incompatible_input", EXIT_INCOMPATIBLE, m)
    }

    /// Attach the path a core error came from.
    pub fn at(path: &Path, e: CoreError) -> Self {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    }

    pub fn io(path: &Path, e: io::Error) -> Self {
        let (kind, code) = if e.kind() == io::ErrorKind::NotFound {
            ("missing_input", EXIT_MISSING_INPUT)
        } else {
            ("io", EXIT_IO)
        };
        Self::new(kind, code, format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "code": self.code,
            "message": self.message,
        })
        .to_string()
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let (kind, code) = match &e {
            CoreError::Io(io) if io.kind() == io::ErrorKind::NotFound => {
                ("missing_input", EXIT_MISSING_INPUT)
            }
            CoreError::Io(_) => ("io", EXIT_IO),
            CoreError::UnrecognizedFormat { .. }
            | CoreError::TruncatedPayload { .. }
            | CoreError::PayloadMismatch(_)
            | CoreError::UnsupportedVersion { .. }
            | CoreError::Header(_) => ("incompatible_input", EXIT_INCOMPATIBLE),
            CoreError::Divergence { .. } | CoreError::NonFiniteGradient(_) => {
                ("training_diverged", EXIT_DIVERGED)
            }
            _ => ("invalid_argument", EXIT_INVALID),
        };
        CliError::new(kind, code, e.to_string())
    }
}
