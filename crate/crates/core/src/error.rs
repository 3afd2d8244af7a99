//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph has no edges")]
    EmptyGraph,

    #[error("edge {index} ('{from}' -> '{to}') has non-positive length {length}")]
    NonPositiveLength {
        index: usize,
        from: String,
        to: String,
        length: f64,
    },

    #[error("graph is disconnected: vertex '{vertex}' is unreachable from '{root}'")]
    DisconnectedGraph { vertex: String, root: String },

    #[error("invalid graph description: {0}")]
    InvalidGraphSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("exponent q = {q} is below 1")]
    InvalidExponent { q: f64 },

    #[error(
        "eigensolver did not converge after {iterations} iterations \
         (k = {k}, last max eigenvalue shift {shift:.3e})"
    )]
    ConvergenceFailure {
        iterations: usize,
        k: usize,
        shift: f64,
    },

    #[error("root bracketing failed for '{equation}': {detail}")]
    RootBracketFailure { equation: String, detail: String },

    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),

    #[error("degenerate resolvent pairing <u, xi> = {value:.3e} <= 0 (assembly corruption?)")]
    DegeneratePairing { value: f64 },

    #[error("degenerate sample: u - mean(u) vanishes")]
    DegenerateSample,

    #[error("sampling budget exceeded: {0}")]
    SamplingBudgetExceeded(String),

    #[error(
        "index k = {k} inadmissible: lambda_(k-1) = {lambda_low:.6e} is not \
         separated from lambda_k = {lambda_high:.6e}"
    )]
    InadmissibleIndex {
        k: usize,
        lambda_low: f64,
        lambda_high: f64,
    },

    #[error("no sign-changing critical point found: {0}")]
    NoSignChangingFound(String),

    #[error("energy ordering violation: {0}")]
    OrderingViolation(String),

    #[error("duplicate solution: {0}")]
    DuplicateSolution(String),

    #[error("branch lost at mu = {mu:.6e}: {reason}")]
    BranchLost { mu: f64, reason: String },

    #[error("projection oracle unavailable for constraint set '{0}'")]
    OracleUnavailable(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("outside the proven regime: {0}")]
    OutOfRegime(String),
}
