use alloc::boxed::Box;
use alloc::string::String;
use thiserror::Error;

use crate::gradcore::ParamStore;

/// Errors raised by the numerical core.
///
/// The variants group into the categories the CLI maps onto exit codes:
/// configuration problems, data/shape problems and numerical divergence.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing parameter slice `{0}`")]
    MissingParam(String),
    #[error("observation modality {0} not present")]
    MissingModality(usize),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("solver produced a non-finite cost at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("training loss became non-finite at epoch {epoch}")]
    TrainingDivergence {
        epoch: usize,
        last_good: Box<ParamStore>,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("score undefined: {0}")]
    UndefinedScore(String),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::MissingModality(_) | Error::MissingParam(_))
    }

    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::TrainingDivergence { .. } | Error::Numerical(_)
        )
    }
}

pub type Result<T> = core::result::Result<T, Error>;
