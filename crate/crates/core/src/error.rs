use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes do not fit the operation.
    Dimension(String),
    /// Input is numerically degenerate, e.g. a zero vector that must be normalized.
    DegenerateInput(String),
    /// A caller broke an operation's precondition.
    Contract(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// A NaN or infinity appeared in the output of an operation.
    NonFinite { op: &'static str },
    /// Training produced a non-finite loss; `batch` describes the offending batch.
    NonFiniteLoss { epoch: usize, batch: usize, composition: String },
    UnknownModality(usize),
}

impl Error {
    /// True for numeric failures (as opposed to caller or configuration errors).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::NonFiniteLoss { epoch, batch, composition } => write!(
                f,
                "non-finite loss at epoch {epoch}, batch {batch}; batch composition: {composition}"
            ),
            Error::UnknownModality(id) => write!(f, "unknown modality id {id}"),
        }
    }
}

impl core::error::Error for Error {}
