use thiserror::Error;

use crate::reconstruction::EstimateReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("A3 block is singular or not positive (a2^2 - 4|c2|^2 = {0:e})")]
    SingularA3(f64),
    #[error("projection failed: no positive eigenvalues in the real representation")]
    AllNegativeSpectrum,
    #[error("output Q function is not normalizable (z-precision matrix not positive definite)")]
    NonNormalizable,
    #[error("grid carries no probability mass (gamma = {0:e})")]
    EmptyGrid(f64),
    #[error("Gaussian integral diverges (real part of quadratic form not positive definite)")]
    Divergent,
    #[error("grid acceptance {0:e} is below 1e-3; the grid misses the output distribution")]
    RejectionOverflow(f64),
    #[error("design is not informationally complete (Gram condition number {cond:e})")]
    NotIc { cond: f64 },
    #[error("input {0} has no nonzero counts")]
    AllZeroRow(usize),
    #[error("optimizer hit the iteration cap after {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        best: Box<EstimateReport>,
    },
    #[error("TP model is not identifiable with {0} input states (need at least 3)")]
    NonIdentifiable(usize),
    #[error("every optimizer start produced a singular design")]
    AllStartsSingular,
    #[error("generated process is not completely positive (min eigenvalue {0:e})")]
    NotCp(f64),
    #[error("generator did not converge in t (last max-difference {0:e})")]
    GeneratorNoConvergence(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by bad numbers rather than bad configuration.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::InvalidInput(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_)
        )
    }
}
