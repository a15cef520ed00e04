use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument is out of range or shapes do not line up.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Input data contains non-finite values.
    #[error("invalid data: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("operation not supported: {0}")]
    Unsupported(String),
    /// An internal invariant was violated; this is a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Parameter(format!($($arg)*))
    };
}

pub(crate) use param_err;
