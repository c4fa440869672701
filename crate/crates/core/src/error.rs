use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An input value or configuration failed validation.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    /// An API contract was violated by the caller.
    #[error("contract violated: {0}")]
    Contract(String),
    /// A loss term became NaN or infinite during training.
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: LossTerm },
}

/// Which part of the regularized objective went non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    CrossEntropy,
    Kl,
}

impl core::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LossTerm::CrossEntropy => f.write_str("cross-entropy"),
            LossTerm::Kl => f.write_str("KL"),
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
