//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes {found:?} in {path}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected}) in {path}")]
    VersionMismatch {
        path: PathBuf,
        found: u16,
        expected: u16,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, got {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("degenerate mask: branch {branch} selected no instances")]
    DegenerateMask { branch: usize },

    #[error("AUC undefined: scores contain only one class")]
    UndefinedAuc,

    #[error("cost calibration infeasible for stage {stage}: fixed cost would be {fixed}")]
    CalibrationInfeasible { stage: String, fixed: f64 },

    #[error("training diverged at epoch {epoch}: {term} became non-finite")]
    Divergence { epoch: usize, term: String },
}

impl Error {
    /// Process exit code for the CLI: 1 for user errors, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::DegenerateMask { .. }
            | Error::UndefinedAuc
            | Error::CalibrationInfeasible { .. }
            | Error::Divergence { .. } => 2,
            _ => 1,
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }
}
