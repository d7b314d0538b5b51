use std::fmt;

use thiserror::Error;

use crate::kernels::Regime;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum BmcError {
    #[error("depth {depth} exceeds the maximum supported depth {max}")]
    DepthOutOfRange { depth: u32, max: u32 },

    #[error("node ({generation}, {index}) is not a valid tree address")]
    InvalidNode { generation: u32, index: u64 },

    #[error("invalid kernel parameters: {0}")]
    InvalidKernel(String),

    #[error("regime mismatch: operation requires {expected}, kernel is {actual}")]
    RegimeMismatch { expected: RegimeSet, actual: Regime },

    #[error("observable basis scale {found} does not match kernel scale {expected}")]
    BasisMismatch { expected: f64, found: f64 },

    #[error("Hermite degree {degree} exceeds the allowed maximum {max}")]
    DegreeTooHigh { degree: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("estimated memory {needed} bytes exceeds the budget of {budget} bytes")]
    MemoryBudget { needed: u128, budget: u128 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("runtime budget exceeded after {completed} of {requested} replicates")]
    BudgetExceeded { completed: usize, requested: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BmcError>;

/// The regimes an operation accepts, for error reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimeSet(pub &'static [Regime]);

impl fmt::Display for RegimeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" or ")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

pub(crate) fn require_regime(actual: Regime, allowed: &'static [Regime]) -> Result<()> {
    if allowed.contains(&actual) {
        Ok(())
    } else {
        Err(BmcError::RegimeMismatch {
            expected: RegimeSet(allowed),
            actual,
        })
    }
}
