use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("address {address:#x} is outside the addressable range [0, {limit:#x})")]
    AddressRange { address: u64, limit: u64 },

    #[error("capacity exceeded for {what}: need {needed} bytes, {available} available")]
    Capacity {
        what: String,
        needed: u64,
        available: u64,
    },

    #[error("invalid configuration: {0}")]
    Configuration(String),

    #[error("inconsistent result: {0}")]
    Consistency(String),

    #[error("model diverged (non-finite weights) at epoch {epoch}, sample {sample}")]
    Divergence { epoch: usize, sample: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("build side declared unique but key {key} occurs more than once")]
    DuplicateKey { key: i32 },

    #[error("engine {engine}: illegal status transition {from} -> {to}")]
    InvalidTransition {
        engine: usize,
        from: &'static str,
        to: &'static str,
    },

    #[error("dataset parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }

    /// Process exit code used by front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Configuration(_) | Error::Parse { .. } => 2,
            Error::Capacity { .. } | Error::AddressRange { .. } => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
