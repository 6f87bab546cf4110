use thiserror::Error;

/// Errors raised by estimation, testing and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("threshold variable takes a single value; no split is possible")]
    DegenerateThresholdVariable,

    #[error("no realization of the threshold variable lies in the trimmed band")]
    EmptyGrid,

    #[error("regime too small at gamma = {gamma}: {n_low} low / {n_high} high, need {n_min} each")]
    RegimeTooSmall { gamma: f64, n_low: usize, n_high: usize, n_min: usize },

    #[error("singular design in {context} (reciprocal condition estimate {rcond:.3e})")]
    SingularDesign { context: String, rcond: f64 },

    #[error("singular weight matrix in {context} (reciprocal condition estimate {rcond:.3e})")]
    SingularWeight { context: String, rcond: f64 },

    #[error("partition at gamma = {gamma} is inconsistent with the first-stage break rho = {rho}")]
    BranchMismatch { gamma: f64, rho: f64 },

    #[error("all {candidates} grid candidates failed; first failure: {first}")]
    AllCandidatesFailed { candidates: usize, first: String },

    #[error("{failed} of {total} replicates failed, above the 1% limit; first failure: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },
}

pub type Result<T> = std::result::Result<T, Error>;
