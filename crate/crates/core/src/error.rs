use std::io;

/// Crate-wide error type. The CLI maps these onto process exit codes, so
/// variants are grouped by how a failure should terminate a run rather than
/// by which module raised it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad dimensions, malformed
    /// JSON, missing files). Maps to exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation's contract (action out of range,
    /// stepping a finished episode, chromosome of the wrong length).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite parameter or objective. Maps to exit
    /// code 3.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    /// A verification routine (gradient check, determinism probe) failed.
    /// Maps to exit code 4.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
