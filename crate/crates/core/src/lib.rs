//! Simulation of nuclear-spin memory dephasing under repeated remote-entanglement attempts
//! on an NV centre electron spin.

pub mod analytic;
pub mod attempt;
pub mod error;
pub mod fitting;
pub mod montecarlo;
pub mod optical;
pub mod physics;
pub mod reference;
pub mod rng;
mod serde_float;

pub use analytic::{binomial_coherence, binomial_sigma, blok_coherence, tau_from_decay, BlokParams, BranchPhases};
pub use attempt::{AttemptSequence, Delay, NoiseModel, ResolvedAttempt};
pub use error::{Error, Result};
pub use physics::{Coupling, ElectronState, ElectronTrajectory, FieldParams, NuclearSpinParams, Segment};
pub use fitting::{fit_exponential, fit_saturation, fit_stretched_exp, Direction, FitOptions, FitResult, Observation};
pub use montecarlo::{
    adaptive_grid, power_to_tau, simulate_curve, simulate_curve_with, sweep, AdaptiveGrid, CoherenceCurve, CoherencePoint,
    GridRule, InitialNuclearState, RepumpPowerLaw, RunSpec, SharedBudget, SimOptions, SweepAxis, SweepOptions, SweepPoint,
};
pub use optical::{
    excitation_stats, pump_probe_curve, Branching, OpticalLevelModel, ProbeMode, PulseEnvelope, PulseShape, PumpProbeConfig,
    PumpProbeCurve, StepControl,
};
pub use reference::{reference, ReferenceSet};
