use thiserror::Error;

use crate::physics::ElectronState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("electron state {0:?} has no nuclear precession frequency (ground triplet only)")]
    InvalidState(ElectronState),

    #[error("spin `{label}` only carries a direct coupling; enable the delta-omega approximation to query ms=+-1 frequencies")]
    MissingHyperfine { label: String },

    #[error("coupling strength is zero, no phase-matching delay exists")]
    NoPhaseMatching,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported sequence: {0}")]
    UnsupportedSequence(String),

    #[error("rotation angle {0} rad is not pi/2 or pi (enable generic alpha to allow it)")]
    UnsupportedAlpha(f64),

    #[error("requested {requested} attempt simulations exceeds the budget of {budget}")]
    BudgetExceeded { requested: u64, budget: u64 },

    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),

    #[error("non-physical inputs: {0}")]
    NonPhysical(String),

    #[error("time step too coarse: rate*dt = {rate_dt:.3} exceeds 0.1")]
    StepTooLarge { rate_dt: f64 },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("value out of domain: {0}")]
    OutOfDomain(String),
}

pub(crate) fn check(cond: bool, name: &'static str, reason: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name, reason: reason() })
    }
}
