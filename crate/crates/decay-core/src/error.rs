//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecayError {
    /// A precondition on the inputs was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The operation needs an evaluator or feature the inputs do not provide.
    #[error("missing capability: {0}")]
    Capability(String),

    /// A simulated state became non-finite (after drift taming).
    #[error("simulation diverged on path {path} at step {step} (t = {time})")]
    SimulationDiverged { path: usize, step: usize, time: f64 },

    /// A test-function family certificate failed its sampled inequality.
    #[error("certificate refused: {0}")]
    CertificateRefused(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DecayError>;

impl DecayError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DecayError::InvalidArgument(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        DecayError::Capability(msg.into())
    }
}
