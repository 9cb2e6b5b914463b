use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("node budget exceeded: {needed} > {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("level mismatch: expected {expected}, got {got}")]
    LevelMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("singular operator ({context}), reciprocal condition {rcond:.3e}")]
    Singular { context: String, rcond: f64 },
    #[error("operator is not self-adjoint: {0}")]
    NotSelfAdjoint(String),
    #[error("symmetry violation: {0}")]
    Symmetry(String),
    #[error("continuation did not converge at stage {stage} (alpha {alpha}): {iterations} iterations, last ratio {ratio:.3e}")]
    NotConverged { stage: usize, alpha: f64, iterations: usize, ratio: f64 },
    #[error("continuation diverged at stage {stage} (alpha {alpha}): contraction ratio {ratio:.3e}")]
    Diverged { stage: usize, alpha: f64, ratio: f64 },
    #[error("quadratic form is indefinite (min eigenvalue {min_eig:.3e}); no minimum exists")]
    Indefinite { min_eig: f64 },
    #[error("linear term not in range of the quadratic form (residual {residual:.3e}); no minimizer")]
    NotInRange { residual: f64 },
    #[error("market violates (H6) at level {level}: r - theta^2 not deterministic")]
    H6Violated { level: usize },
    #[error("invalid market: {0}")]
    Market(String),
    #[error("internal check failed: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
