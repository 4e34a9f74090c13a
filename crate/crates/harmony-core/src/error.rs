//! Error types shared across the crate.

use alloc::string::String;
use core::fmt;

/// Violation of an operation precondition (shape mismatch, index out of
/// range, invalid configuration). These indicate caller bugs, not runtime
/// conditions, and carry a message naming the violated contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractError(pub String);

impl fmt::Display for ContractError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "contract violation: {}", self.0)
    }
}

impl core::error::Error for ContractError {}

/// Runtime failure surfaced by the pipelines in this crate.
#[derive(Debug, Clone, PartialEq)]
pub enum HarmonyError {
    /// A precondition did not hold.
    Contract(ContractError),
    /// An activation or loss became non-finite.
    NonFinite { context: String },
    /// A configuration value is invalid (e.g. heads not dividing the
    /// feature dimension, unknown block site).
    Config(String),
    /// A vocabulary lookup failed; carries the offending token.
    UnknownToken(String),
    /// Scene generation could not satisfy its layout constraints within the
    /// retry budget.
    LayoutExhausted { count: usize, attempts: usize },
    /// A metric was requested on input for which it is undefined.
    UndefinedMetric(String),
    /// Training diverged.
    Diverged { step: usize },
}

impl fmt::Display for HarmonyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarmonyError::Contract(c) => c.fmt(f),
            HarmonyError::NonFinite { context } => {
                write!(f, "non-finite values in {context}")
            }
            HarmonyError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            HarmonyError::UnknownToken(tok) => write!(f, "unknown token: {tok:?}"),
            HarmonyError::LayoutExhausted { count, attempts } => write!(
                f,
                "could not place {count} non-overlapping shapes after {attempts} attempts"
            ),
            HarmonyError::UndefinedMetric(msg) => write!(f, "metric undefined: {msg}"),
            HarmonyError::Diverged { step } => write!(f, "training diverged at step {step}"),
        }
    }
}

impl core::error::Error for HarmonyError {}

impl From<ContractError> for HarmonyError {
    fn from(value: ContractError) -> Self {
        HarmonyError::Contract(value)
    }
}

pub type Result<T> = core::result::Result<T, HarmonyError>;

/// Build a `ContractError` from format arguments.
#[macro_export]
macro_rules! contract_violation {
    ($($arg:tt)*) => {
        $crate::error::ContractError(alloc::format!($($arg)*))
    };
}

/// Assert an operation precondition, returning a contract error otherwise.
#[macro_export]
macro_rules! require {
    ($cond:expr, $($arg:tt)*) => {
        if !($cond) {
            return Err($crate::error::HarmonyError::Contract(
                $crate::contract_violation!($($arg)*),
            ));
        }
    };
}
