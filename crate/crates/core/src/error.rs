use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("address {addr:#x} out of range (namespace capacity {capacity:#x})")]
    AddressOutOfRange { addr: u64, capacity: u64 },

    #[error("invalid location: {0}")]
    InvalidLocation(String),

    #[error("invalid configuration key `{key}`: {msg}")]
    Validation { key: String, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(String),
}

impl SimError {
    pub fn validation(key: impl Into<String>, msg: impl Into<String>) -> Self {
        SimError::Validation {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for user-facing configuration problems, as opposed to engine bugs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            SimError::Validation { .. }
                | SimError::Parse { .. }
                | SimError::AddressOutOfRange { .. }
                | SimError::InvalidLocation(_)
                | SimError::Io(_)
        )
    }
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
