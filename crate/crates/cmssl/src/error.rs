use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, CliError>;

/// Exit code for configuration and validation errors.
pub const EXIT_CONFIG: u8 = 2;
/// Exit code for numeric failures at run time.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// The experiment config failed to parse; `path` is the offending key path.
    ConfigKey { path: String, message: String },
    /// The experiment config parsed but is inconsistent.
    Config(String),
    Io { path: PathBuf, source: io::Error },
    /// A data or checkpoint file is malformed.
    Format { path: PathBuf, message: String },
    Core(cmssl_core::Error),
    /// The gradient suite found mismatches in these cases.
    GradCheck(Vec<String>),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::GradCheck(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::ConfigKey { path, message } => write!(f, "config error at `{path}`: {message}"),
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Format { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradCheck(cases) => write!(f, "gradient check failed for: {}", cases.join(", ")),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Io { source, .. } => Some(source),
            CliError::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<cmssl_core::Error> for CliError {
    fn from(e: cmssl_core::Error) -> Self {
        CliError::Core(e)
    }
}
