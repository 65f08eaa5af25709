use std::path::PathBuf;

/// Errors produced anywhere in the reconstruction stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or frame dimensions do not line up.
    #[error("dimension error: {0}")]
    Shape(String),

    /// NaN or infinity appeared in an operation result.
    #[error("numeric fault: {0}")]
    Numeric(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file did not match its documented layout.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Autodiff misuse: non-scalar loss, foreign tape, or no differentiable path.
    #[error("gradient tape: {0}")]
    Tape(String),

    /// A named parameter is missing from a weight store or has the wrong shape.
    #[error("weights: {0}")]
    Weights(String),

    /// Training diverged or produced a non-finite loss.
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use invalid;
