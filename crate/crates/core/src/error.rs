use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("quadrature did not converge: worst estimated residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    QuadratureNonConvergence { residual: f64, tolerance: f64 },

    #[error("profile table too coarse: estimated interpolation error {bound:.3e} exceeds tolerance {tolerance:.3e}")]
    InterpolationTooCoarse { bound: f64, tolerance: f64 },

    #[error("factorization failed during {stage}")]
    Factorization { stage: &'static str },

    #[error("CFL condition violated: k/h = {ratio:.4} > 1/sqrt(2)")]
    CflViolation { ratio: f64 },

    #[error("source support too close to the domain boundary: reflections reach a detector at t = {arrival:.4} < horizon {horizon:.4}")]
    SupportTooClose { arrival: f64, horizon: f64 },

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("role violation: {0}")]
    RoleViolation(String),

    #[error("bad container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("checksum mismatch for {path}: expected {expected:016x}, found {actual:016x}")]
    Checksum {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage {stage} failed on {path}: {source}")]
    Stage {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn container(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Container {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
