//! Threshold regression with endogenous regressors: GMM and 2SLS estimators,
//! sup-Wald and sup-LR tests for a threshold effect, wild bootstrap p-values
//! and a Monte Carlo harness.

pub mod bootstrap;
pub mod covariance;
pub mod data;
pub mod error;
pub mod estimators;
pub(crate) mod linalg;
pub mod montecarlo;
pub mod statistics;

pub use covariance::{ResidualSource, VarianceMode};
pub use data::{build_grid, partition, Dataset, RegimePartition, SkippedCandidate, ThresholdGrid};
pub use error::{Error, Result};
pub use estimators::{FirstStage, FirstStageMode, FirstStageSpec};
pub use linalg::RCOND_TOL;
pub use statistics::{SequenceResult, TestKind};
