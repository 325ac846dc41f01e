use thiserror::Error;

/// Errors raised by the lab.
#[derive(Debug, Error)]
pub enum SppoError {
    /// Malformed or out-of-range input (bad ids, invalid distributions, empty batches).
    #[error("invalid input: {0}")]
    Input(String),
    /// A mathematically undefined quantity was requested, e.g. KL with a support violation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The operation does not apply to this oracle variant.
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    /// A configured resource cap would be exceeded.
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("optimizer did not converge after {steps} steps (gradient norm {grad_norm:.3e}, loss {loss:.6e})")]
    NotConverged {
        steps: usize,
        grad_norm: f64,
        loss: f64,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SppoError> = std::result::Result<T, E>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SppoError::Input(msg.into()))
}
