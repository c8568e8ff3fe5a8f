//! Error types shared across the crate.
//!
//! The variants map onto the process exit classes used by the CLI:
//! config/validation problems, I/O problems, and numerical failures.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or axis disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An API precondition was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An object was used in an order its lifecycle forbids.
    #[error("invalid state: {0}")]
    State(String),

    /// A configuration value or combination is invalid. Carries the field path.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// Inputs on which the requested quantity is mathematically undefined.
    #[error("undefined input: {0}")]
    UndefinedInput(String),

    /// A container file failed structural validation.
    #[error("format error in {path}: {kind}")]
    Format { path: PathBuf, kind: FormatErrorKind },

    #[error("i/o error{}: {source}", path_suffix(.path))]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },

    /// A numerical procedure failed in a way the caller cannot recover from.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatErrorKind {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("file truncated while reading {context}")]
    Truncated { context: String },

    #[error("shape mismatch for tensor '{tensor}': expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("corrupt container: {0}")]
    Corrupt(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: Some(path.into()),
            source,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { path: None, source }
    }
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" ({})", p.display()),
        None => String::new(),
    }
}
