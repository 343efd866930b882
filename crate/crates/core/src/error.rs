use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must agree do not.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// A computation produced NaN or infinity.
    NonFinite { op: &'static str },
    /// A value lies outside its admissible range.
    InvalidParameter { name: &'static str, reason: String },
    /// An operation needed at least one element.
    Empty { what: &'static str },
    /// A named segment does not exist in a parameter vector.
    MissingSegment { name: String },
    /// A training component produced a non-finite loss or update.
    Diverged { component: &'static str, op: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "dimension mismatch in {what}: expected {expected}, found {found}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by `{op}`"),
            Error::InvalidParameter { name, reason } => write!(f, "{name} {reason}"),
            Error::Empty { what } => write!(f, "{what} is empty"),
            Error::MissingSegment { name } => write!(f, "missing parameter segment `{name}`"),
            Error::Diverged { component, op } => write!(f, "{component} diverged: non-finite value in `{op}`"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

pub(crate) fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Attributes a non-finite failure to a training component.
pub(crate) fn in_component(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged { component, op },
        other => other,
    }
}
