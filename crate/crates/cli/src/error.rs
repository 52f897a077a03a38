use std::fmt;
use std::io::ErrorKind;
use std::path::Path;

/// Process exit codes. Usage errors reported by the argument parser also
/// exit with 2.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const MISSING_INPUT: i32 = 2;
    pub const INVALID_SPEC: i32 = 3;
    pub const SEQUENCING: i32 = 4;
    pub const KIND_MISMATCH: i32 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn missing(path: &Path) -> Self {
        CliError::new(exit::MISSING_INPUT, format!("missing input: {}", path.display()))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        CliError::new(exit::INVALID_SPEC, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<unitforge::Error> for CliError {
    fn from(e: unitforge::Error) -> Self {
        use unitforge::Error as E;
        let code = match &e {
            E::Io { source, .. } if source.kind() == ErrorKind::NotFound => exit::MISSING_INPUT,
            E::Config(_) | E::Json(_) => exit::INVALID_SPEC,
            E::Sequencing(_) => exit::SEQUENCING,
            E::KindMismatch(_) => exit::KIND_MISMATCH,
            _ => exit::FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

/// Fails with the missing-input code unless `path` exists.
pub fn require_input(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    unitforge::Error::io(path, e).into()
}
