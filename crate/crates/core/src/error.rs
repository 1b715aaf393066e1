use thiserror::Error;

/// Everything that can go wrong while building or solving a problem.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {field}: expected {expected}, found {found}")]
    ShapeMismatch { field: String, expected: String, found: String },
    #[error("{field} contains a non-finite entry")]
    NonFinite { field: String },
    #[error("{0} is not symmetric")]
    NonSymmetric(String),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),
    #[error("{0} is not positive semidefinite")]
    NotPositiveSemidefinite(String),
    #[error("matrix exponential out of range: |tM|_1 = {norm:e}")]
    Overflow { norm: f64 },
    #[error("system is not controllable (rank {rank} < {n})")]
    NotControllable { rank: usize, n: usize },
    #[error("{what} is ill-conditioned (condition number {condition:e})")]
    IllConditioned { what: String, condition: f64 },
    #[error("consistency relation `{relation}` violated (residual {residual:e})")]
    ConsistencyFailure { relation: String, residual: f64 },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("controllable block is empty (d = 0)")]
    DegenerateFiber,
    #[error("marginals are incompatible with the uncontrolled dynamics (discrepancy {discrepancy:e})")]
    IncompatibleMarginals { discrepancy: f64 },
    #[error("measure has no atoms with positive weight")]
    EmptyMeasure,
    #[error("weight {index} is negative or not finite ({weight})")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("density vanishes on the sampling box")]
    ZeroDensity,
    #[error("cost entry ({i}, {j}) is not finite")]
    NonFiniteCost { i: usize, j: usize },
    #[error("transport problem is infeasible: {0}")]
    Infeasible(String),
    #[error("solver stalled after {iterations} iterations: {detail}")]
    NumericalStall { iterations: usize, detail: String },
    #[error("plan splits mass at sources {split_sources:?}")]
    NotDeterministic { split_sources: Vec<usize> },
    #[error("endpoint is not reachable (residual {residual:e})")]
    UnreachableEndpoint { residual: f64 },
    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),
    #[error("quadrature did not converge (last change {change:e})")]
    QuadratureNotConverged { change: f64 },
    #[error("invalid density expression at byte {position}: {message}")]
    InvalidExpression { message: String, position: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
