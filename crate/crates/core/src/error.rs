// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("failed to load model: {0}")]
    Load(String),

    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },

    #[error("hook `{0}` missing from activation cache")]
    CacheMiss(String),

    #[error("task not solved by the model (base logit difference {0:.4} <= 0); circuit undefined")]
    TaskUnsolved(f64),

    #[error("performance-change baseline is zero")]
    UndefinedBaseline,

    #[error("all clamped ablation drops are zero; influence is degenerate")]
    DegenerateInfluence,

    #[error("no student components of kind `{0}` to match against")]
    UnmatchedKind(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("probe resample error: {0}")]
    Resample(String),

    #[error("toy model construction failed: {0}")]
    Construction(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Domain(_) => "domain",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Load(_) => "load",
            Error::Tensor { .. } => "tensor",
            Error::CacheMiss(_) => "cache_miss",
            Error::TaskUnsolved(_) => "task_unsolved",
            Error::UndefinedBaseline => "undefined_baseline",
            Error::DegenerateInfluence => "degenerate_influence",
            Error::UnmatchedKind(_) => "unmatched_kind",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Generation(_) => "generation",
            Error::Parse { .. } => "parse",
            Error::Resample(_) => "resample",
            Error::Construction(_) => "construction",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
