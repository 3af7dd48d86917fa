use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("svd of a {rows}x{cols} matrix did not converge within {sweeps} sweeps")]
    SvdNoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("matrix is not symmetric (max |s_ij - s_ji| = {0:e})")]
    NotSymmetric(f64),

    /// Every coefficient on the top eigen-block vanishes, so the secular
    /// equation has no root to the right of the largest pole.
    #[error("trust-region hard case: the linear term has no component along the top singular direction")]
    HardCase,

    #[error("secular equation root not found in bracket [{lo:e}, {hi:e}] (phi(lo) = {phi_lo:e}, phi(hi) = {phi_hi:e})")]
    RootNotFound {
        lo: f64,
        hi: f64,
        phi_lo: f64,
        phi_hi: f64,
    },

    #[error("multiplier {mu:e} must exceed the largest eigenvalue {lambda_max:e}")]
    MultiplierTooSmall { mu: f64, lambda_max: f64 },

    #[error("{path}: malformed IDX file at byte offset {offset}: {reason}")]
    Idx {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
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
