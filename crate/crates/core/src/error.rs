use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("state space needs at least two states, got {0}")]
    TooFewStates(usize),
    #[error("state labels must be pairwise distinct")]
    DuplicateLabels,
    #[error("transition matrix must be {expected}x{expected}, got {rows}x{cols}")]
    BadShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("row {row} of the transition matrix sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("entry ({row},{col}) of the transition matrix is {value}, outside [0,1]")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("the chain is not irreducible")]
    NotIrreducible,
    #[error("the chain is not aperiodic (second eigenvalue modulus {modulus})")]
    NotAperiodic { modulus: f64 },
    #[error("linear solve failed; matrix is singular or badly conditioned")]
    Singular,
    #[error("path of length {len} is too short for tuple order {order}")]
    PathTooShort { len: usize, order: usize },
    #[error("dense counts of order {order} over {n_states} states exceed the supported size")]
    CountsTooLarge { n_states: usize, order: usize },
    #[error("counts have order {found}, but the operation needs order {required}")]
    OrderMismatch { found: usize, required: usize },
    #[error("parameter vector is outside the model domain")]
    OutOfDomain,
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("model probability is zero at cell ({row},{col}) but its count is positive")]
    ZeroProbability { row: usize, col: usize },
    #[error("optimization failed to converge in any of {starts} starts")]
    NoConvergence { starts: usize },
    #[error("degenerate data: {0}")]
    DataDegenerate(String),
    #[error("no closed-form estimator for this family and method")]
    NoClosedForm,
    #[error("information matrix is numerically singular (condition estimate {cond:.3e})")]
    SingularInformation { cond: f64 },
    #[error("determinant of the transition matrix is {det}; log-determinant distance undefined")]
    SingularP { det: f64 },
    #[error("{failed} of {total} Monte Carlo replications failed to converge")]
    TooManyFailures { failed: usize, total: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<V> = std::result::Result<V, Error>;
