use alloc::boxed::Box;
use alloc::string::String;

use crate::fusion::FusionReport;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("optimization failed at iteration {iteration} of view {view}: {reason}")]
    Optimization {
        view: u32,
        iteration: usize,
        reason: String,
    },

    #[error("fusion precondition: {0}")]
    FusionPrecondition(String),

    #[error("fusion failed: every view was rejected")]
    FusionFailed(Box<FusionReport>),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }
}
