#[derive(Debug, thiserror::Error)]
pub enum SlqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("asymmetric input: max |X - X'| entry {found:.3e} exceeds tolerance {tol:.3e}")]
    Asymmetric { found: f64, tol: f64 },

    /// a positive-definiteness requirement failed; `constraint` names which one
    #[error("{constraint} violated (min eigenvalue {min_eig:.3e})")]
    ConstraintViolated { constraint: &'static str, min_eig: f64 },

    #[error("convergence failure: {0}")]
    ConvergenceFailure(String),

    #[error("rank condition failed: {0}")]
    RankCondition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("gain is not mean-square stabilizing; infinite-horizon cost diverges")]
    UnstableGain,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SlqError>;
