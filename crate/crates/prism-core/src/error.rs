//! Error types shared across the crate.

use alloc::string::String;
use core::fmt;

/// Failure reported by a denoiser or verifier backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    message: String,
}

impl BackendError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into() }
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "backend failure: {}", self.message)
    }
}

impl core::error::Error for BackendError {}

/// Errors raised by the search stack itself.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration field violates its documented domain.
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    /// An argument violates an operation's documented domain.
    InvalidArgument {
        what: &'static str,
        message: String,
    },
    /// A sequence-state operation touched a position it must not touch.
    InvalidPosition { position: usize, message: String },
    /// A counter would exceed [`crate::ledger::NfeLedger::MAX_TOTAL`].
    LedgerOverflow,
    /// A logit that must be finite was NaN or infinite.
    NonFiniteLogit,
    /// A backend call failed and the failure is not recoverable here.
    Backend(BackendError),
    /// An internal invariant was violated; indicates a bug, not bad input.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig { field, message } => {
                write!(f, "invalid config: {field}: {message}")
            }
            Error::InvalidArgument { what, message } => {
                write!(f, "invalid argument: {what}: {message}")
            }
            Error::InvalidPosition { position, message } => {
                write!(f, "invalid position {position}: {message}")
            }
            Error::LedgerOverflow => write!(f, "ledger counter overflow"),
            Error::NonFiniteLogit => write!(f, "non-finite logit"),
            Error::Backend(e) => write!(f, "{e}"),
            Error::Internal(msg) => write!(f, "internal invariant violated: {msg}"),
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Backend(e) => Some(e),
            _ => None,
        }
    }
}

impl From<BackendError> for Error {
    fn from(e: BackendError) -> Self {
        Error::Backend(e)
    }
}
