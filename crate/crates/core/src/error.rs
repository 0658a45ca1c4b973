use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{family}: value {value} lies outside the open domain {domain}")]
    Domain {
        family: String,
        value: f64,
        domain: String,
    },
    #[error("{family}: evaluation at {value} overflows f64")]
    Range { family: String, value: f64 },
    #[error("non-finite input {value} to {context}")]
    NonFinite { context: &'static str, value: f64 },
    #[error("invalid sigmoid family: {0}")]
    InvalidFamily(String),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("constraint matrix is rank deficient: smallest singular value {smallest:e} < {tolerance:e} x largest {largest:e}")]
    RankDeficient {
        smallest: f64,
        largest: f64,
        tolerance: f64,
    },
    #[error("constraint matrix has {rows} rows but only {cols} columns; need fewer constraints than outputs")]
    TooManyConstraints { rows: usize, cols: usize },
    #[error("target violates A y = b: residual {residual:e} exceeds {tolerance:e}")]
    InfeasibleTarget { residual: f64, tolerance: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(&'static str),
    #[error("lagrange solver diverged at iteration {iteration}: non-finite loss")]
    Diverged { iteration: usize },
    #[error("newton step failed at iteration {iteration}: hessian is not positive definite")]
    HessianSolve { iteration: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mismatched epoch counts across runs: {expected} vs {found}")]
    EpochMismatch { expected: usize, found: usize },
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            found,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::dim(context, expected, found))
    }
}
