//! Crate-wide error type and the CLI-facing error categories.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BicoError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: String, detail: String },

    #[error("missing gradient for trainable parameter `{name}`")]
    MissingGradient { name: String },

    #[error("non-finite loss: {context}")]
    NonFiniteLoss { context: String },

    #[error("numerical abort: {context}")]
    NumericalAbort { context: String },

    #[error("unknown token: {what}")]
    UnknownToken { what: String },

    #[error("prompt too long: {len} rows exceeds max {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("invalid scene spec: {reason}")]
    InvalidSpec { reason: String },

    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },

    #[error("invalid plan: {reason}")]
    InvalidPlan { reason: String },

    #[error("fingerprint mismatch: binder was trained against base {expected}, active base is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("unknown source `{id}` in composition plan")]
    UnknownSource { id: String },

    #[error("binder set is already dual-branch")]
    AlreadyDualBranch,

    #[error("malformed checkpoint: {reason}")]
    Checkpoint { reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BicoError {
    pub fn dim(op: &str, detail: impl Into<String>) -> Self {
        BicoError::DimMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    /// Machine-parsable category used by the CLI for single-line error output
    /// and exit codes.
    pub fn category(&self) -> &'static str {
        use BicoError::*;
        match self {
            InvalidConfig { .. } | InvalidPlan { .. } => "config",
            FingerprintMismatch { .. } => "fingerprint",
            NonFiniteLoss { .. } | NumericalAbort { .. } => "numeric",
            Io(_) => "io",
            Json(_) => "json",
            Checkpoint { .. } => "checkpoint",
            DimMismatch { .. } => "dims",
            _ => "usage",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" | "json" => 2,
            "fingerprint" => 3,
            "numeric" => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BicoError>;
