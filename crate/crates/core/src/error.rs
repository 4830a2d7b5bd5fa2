use thiserror::Error;

/// Crate-wide error type.
///
/// The taxonomy mirrors the failure modes of the pipeline: shape violations,
/// contract violations (caller passed semantically invalid arguments), an
/// infeasible transport problem, undefined metrics, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or mask dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A precondition on the operation's arguments was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// The relaxed coupling polytope is empty (row cap too small for the mass).
    #[error("infeasible coupling: {0}")]
    Infeasible(String),

    /// AUC needs at least one positive and one negative subject.
    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    /// A pipeline stage was invoked before its upstream artifact exists.
    #[error("missing artifact for stage `{stage}`: {detail}")]
    MissingArtifact { stage: String, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
