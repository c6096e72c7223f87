use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the super-resolution pipeline.
///
/// The variants map one-to-one onto the process exit codes used by the CLI
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor or grid shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// NaN/Inf values, diverging losses, or a solver producing invalid state.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Configuration is inconsistent or incompatible with the data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file does not follow the expected layout.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A file is shorter or longer than its header declares.
    #[error("corrupt file {path}: {msg}")]
    Corruption { path: PathBuf, msg: String },

    /// A checkpoint or manifest was written by an incompatible version.
    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 contract/config, 3 I/O, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Dimension(_) | Error::Config(_) | Error::Incompatible(_) => 2,
            Error::Format { .. } | Error::Corruption { .. } | Error::Io { .. } | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

/// Shorthand for returning a contract error when `cond` is false.
macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
