use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument violates an operation's precondition.
    InvalidArgument(String),
    /// Physically meaningless input, e.g. a non-positive collision frequency.
    Domain(String),
    /// A direct solver hit a zero pivot or produced non-finite values.
    NumericalFailure(String),
    /// A network or field required by the selected method is missing.
    Configuration(String),
    /// Training produced a non-finite or exploding loss.
    Divergence {
        epoch: usize,
        total: f64,
        detail: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::NumericalFailure(m) => write!(f, "numerical failure: {m}"),
            Error::Configuration(m) => write!(f, "configuration error: {m}"),
            Error::Divergence {
                epoch,
                total,
                detail,
            } => write!(f, "training diverged at epoch {epoch} (total loss {total:e}): {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
