//! Bilevel problem instances packaged as [`FixedPointProblem`]s.
//!
//! [`FixedPointProblem`]: crate::hypergrad::FixedPointProblem

use thiserror::Error;

use crate::domains::DomainError;
use crate::hypergrad::HypergradError;

pub mod data;
pub mod distill;
pub mod ssl;
pub mod toy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),
    #[error("lower-level Hessian is singular")]
    SingularSystem,
    #[error("inner stepsize is not contractive: {0}")]
    NonContractiveStep(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Hypergrad(#[from] HypergradError),
}

impl From<ProblemError> for HypergradError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::Hypergrad(h) => h,
            other => HypergradError::Problem(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ProblemError>;
