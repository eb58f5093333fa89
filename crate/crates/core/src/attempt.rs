//! One entangling attempt: declarative timing and its stochastic realization.
//!
//! An attempt runs, in order: the microwave rotation R(alpha), a wait `t`,
//! optionally an electron R(pi) and a second wait `t`, the repump window of
//! length `t_r`, and finally the post-repump delay `T` (plus any slack up to the
//! configured attempt duration). The microwave drives the ms=0 <-> ms=-1
//! transition only, so an electron stranded in ms=+1 is left untouched.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{check, Error, Result};
use crate::physics::{
    accumulate_phase, phase_match_delay, Detunings, ElectronState, ElectronTrajectory, FieldParams, NuclearSpinParams,
};

/// Rule for the inter-pulse delay `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Delay {
    Seconds { value: f64 },
    /// k nuclear Larmor periods, 2 pi k / omega_0.
    LarmorPeriods { count: u32 },
    /// k phase-matching periods, 2 pi k / dw.
    PhaseMatched { count: u32 },
}

impl Delay {
    pub fn resolve(&self, spin: &NuclearSpinParams, field: &FieldParams) -> Result<f64> {
        match *self {
            Delay::Seconds { value } => {
                check(value.is_finite() && value >= 0.0, "inter_pulse_delay", || {
                    format!("must be >= 0, got {value}")
                })?;
                Ok(value)
            }
            Delay::LarmorPeriods { count } => Ok(f64::from(count) * field.larmor_period()),
            Delay::PhaseMatched { count } => phase_match_delay(spin, field, count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptSequence {
    /// First microwave rotation angle (rad).
    pub alpha: f64,
    /// Electron R(pi) between the two waits.
    pub has_middle_pi: bool,
    pub inter_pulse_delay: Delay,
    /// Delay between the end of the repump and the next microwave pulse (s).
    pub post_repump_delay: f64,
    pub repump_duration: f64,
    /// Total attempt length; `None` means the sum of the parts.
    pub attempt_duration: Option<f64>,
    /// Accept rotation angles other than pi/2 and pi.
    #[serde(default)]
    pub generic_alpha: bool,
}

impl AttemptSequence {
    /// Decoupled attempt with an electron echo: R(pi/2), t, R(pi), t, 2 us repump, 7 us total.
    pub fn standard(delay: Delay) -> Self {
        Self {
            alpha: FRAC_PI_2,
            has_middle_pi: true,
            inter_pulse_delay: delay,
            post_repump_delay: 0.0,
            repump_duration: 2e-6,
            attempt_duration: Some(7e-6),
            generic_alpha: false,
        }
    }

    /// Shortened attempt without the electron echo: R(alpha), t, 2 us repump.
    pub fn shortened(alpha: f64, delay: Delay) -> Self {
        Self {
            alpha,
            has_middle_pi: false,
            inter_pulse_delay: delay,
            post_repump_delay: 0.0,
            repump_duration: 2e-6,
            attempt_duration: None,
            generic_alpha: false,
        }
    }

    pub fn resolve(&self, spin: &NuclearSpinParams, field: &FieldParams) -> Result<ResolvedAttempt> {
        check(self.alpha > 0.0 && self.alpha <= PI, "alpha", || {
            format!("must lie in (0, pi], got {}", self.alpha)
        })?;
        let is_standard = (self.alpha - FRAC_PI_2).abs() < 1e-9 || (self.alpha - PI).abs() < 1e-9;
        if !is_standard && !self.generic_alpha {
            return Err(Error::UnsupportedAlpha(self.alpha));
        }
        check(self.post_repump_delay >= 0.0, "post_repump_delay", || "must be >= 0".into())?;
        check(self.repump_duration >= 0.0, "repump_duration", || "must be >= 0".into())?;
        let t = self.inter_pulse_delay.resolve(spin, field)?;
        let waits = if self.has_middle_pi { 2.0 * t } else { t };
        let parts = waits + self.repump_duration + self.post_repump_delay;
        let duration = match self.attempt_duration {
            Some(d) => {
                check(d >= parts * (1.0 - 1e-12), "attempt_duration", || {
                    format!("{d} s is shorter than the {parts} s the schedule needs")
                })?;
                d
            }
            None => parts,
        };
        let flip_probability = if (self.alpha - PI).abs() < 1e-9 {
            1.0
        } else if (self.alpha - FRAC_PI_2).abs() < 1e-9 {
            0.5
        } else {
            (self.alpha / 2.0).sin().powi(2)
        };
        Ok(ResolvedAttempt {
            flip_probability,
            has_middle_pi: self.has_middle_pi,
            inter_pulse_delay: t,
            repump_duration: self.repump_duration,
            post_repump_delay: self.post_repump_delay,
            tail: (duration - parts).max(0.0) + self.post_repump_delay,
            duration,
        })
    }
}

/// Attempt timing in seconds after resolving the delay rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedAttempt {
    /// Probability that R(alpha) flips ms=0 <-> ms=-1: sin^2(alpha/2).
    pub flip_probability: f64,
    pub has_middle_pi: bool,
    pub inter_pulse_delay: f64,
    pub repump_duration: f64,
    pub post_repump_delay: f64,
    /// Time spent after the repump window: T plus slack.
    pub tail: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Failure probability of every microwave pulse (failed pulse = identity).
    pub p_mw: f64,
    /// Separate failure probability for the first rotation R(alpha); `None` uses `p_mw`.
    #[serde(default)]
    pub p_mw_alpha: Option<f64>,
    /// Total probability that the repump leaves the electron in ms=+-1.
    pub p_init: f64,
    /// Mean dwell in ms=+-1 once the repump is on (s).
    pub tau: f64,
    /// Run-to-run Gaussian width of the repump mean (s).
    pub sigma_tau_qs: f64,
    /// Run-to-run Gaussian width of the nuclear detuning (rad/s).
    pub sigma_detuning_qs: f64,
    pub p_depol_per_attempt: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { p_mw: 0.0, p_mw_alpha: None, p_init: 0.0, tau: 0.0, sigma_tau_qs: 0.0, sigma_detuning_qs: 0.0, p_depol_per_attempt: 0.0 }
    }

    pub fn pure_repump(tau: f64) -> Self {
        Self { tau, ..Self::noiseless() }
    }

    /// Detuning width whose Gaussian average decays as exp[-(t/T2*)^2].
    pub fn detuning_width_for_t2_star(t2_star: f64) -> f64 {
        std::f64::consts::SQRT_2 / t2_star
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_mw", self.p_mw),
            ("p_mw_alpha", self.p_mw_alpha.unwrap_or(0.0)),
            ("p_init", self.p_init),
            ("p_depol_per_attempt", self.p_depol_per_attempt),
        ] {
            check((0.0..=1.0).contains(&p), name, || format!("probability must lie in [0, 1], got {p}"))?;
        }
        check(self.tau.is_finite() && self.tau >= 0.0, "tau", || format!("must be >= 0, got {}", self.tau))?;
        check(self.sigma_tau_qs >= 0.0, "sigma_tau_qs", || "must be >= 0".into())?;
        check(self.sigma_detuning_qs >= 0.0, "sigma_detuning_qs", || "must be >= 0".into())
    }
}

/// Quasi-static offsets drawn once per run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub tau_offset: f64,
    pub detuning_offset: f64,
}

impl RunContext {
    pub fn draw<R: Rng + ?Sized>(noise: &NoiseModel, rng: &mut R) -> Self {
        let mut gauss = |sigma: f64| if sigma > 0.0 { sigma * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { 0.0 };
        let tau_offset = gauss(noise.sigma_tau_qs);
        let detuning_offset = gauss(noise.sigma_detuning_qs);
        Self { tau_offset, detuning_offset }
    }
}

/// A reset out of ms=+-1 inside the repump window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetEvent {
    pub from: ElectronState,
    pub dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub trajectory: ElectronTrajectory,
    pub ended_in_ms0: bool,
    pub init_failed: bool,
    pub mw_failed: bool,
    pub reset: Option<ResetEvent>,
}

impl AttemptOutcome {
    /// Nuclear phase of this attempt with the calibrated mean reset phase removed:
    /// a reset from state s contributes (omega_s - omega_0) * (dwell - reference_dwell).
    pub fn nuclear_phase(&self, spin: &NuclearSpinParams, field: &FieldParams, reference_dwell: f64) -> Result<f64> {
        let raw = accumulate_phase(&self.trajectory, spin, field)?;
        Ok(match self.reset {
            Some(r) => raw - Detunings::new(spin, field)?.of(r.from) * reference_dwell,
            None => raw,
        })
    }

    pub fn exit_state(&self) -> ElectronState {
        self.trajectory.final_state().unwrap_or(ElectronState::Ms0)
    }
}

pub(crate) trait SegmentSink {
    fn segment(&mut self, state: ElectronState, duration: f64);
}

impl SegmentSink for ElectronTrajectory {
    #[inline]
    fn segment(&mut self, state: ElectronState, duration: f64) {
        self.push(state, duration);
    }
}

/// Accumulates rotating-frame phase without storing segments.
pub(crate) struct PhaseSink<'a> {
    pub detunings: &'a Detunings,
    pub phase: f64,
}

impl SegmentSink for PhaseSink<'_> {
    #[inline]
    fn segment(&mut self, state: ElectronState, duration: f64) {
        self.phase += self.detunings.of(state) * duration;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttemptFlags {
    pub exit: ElectronState,
    pub init_failed: bool,
    pub mw_failed: bool,
    pub reset: Option<ResetEvent>,
}

/// Per-run constants for the attempt kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedAttempt {
    pub timing: ResolvedAttempt,
    pub p_mw: f64,
    pub p_mw_alpha: f64,
    pub p_init: f64,
    mean_dwell: f64,
    /// Extra failure probability after a successful reset so that the total is p_init.
    p_floor_bright: f64,
}

impl PreparedAttempt {
    pub fn new(timing: &ResolvedAttempt, noise: &NoiseModel, ctx: &RunContext) -> Self {
        let mean_dwell = (noise.tau + ctx.tau_offset).max(0.0);
        let p_truncated = if mean_dwell > 0.0 { (-timing.repump_duration / mean_dwell).exp() } else { 0.0 };
        let p_floor_bright = if p_truncated >= 1.0 {
            0.0
        } else {
            (1.0 - (1.0 - noise.p_init) / (1.0 - p_truncated)).max(0.0)
        };
        Self { timing: *timing, p_mw: noise.p_mw, p_mw_alpha: noise.p_mw_alpha.unwrap_or(noise.p_mw), p_init: noise.p_init, mean_dwell, p_floor_bright }
    }

    #[inline]
    fn microwave<R: Rng + ?Sized>(
        state: ElectronState,
        flip_p: f64,
        p_fail: f64,
        rng: &mut R,
        failed: &mut bool,
    ) -> ElectronState {
        if state == ElectronState::MsPlus1 {
            return state;
        }
        if p_fail > 0.0 && rng.random::<f64>() < p_fail {
            *failed = true;
            return state;
        }
        let flip = if flip_p >= 1.0 {
            true
        } else if flip_p <= 0.0 {
            false
        } else {
            rng.random::<f64>() < flip_p
        };
        match (flip, state) {
            (true, ElectronState::Ms0) => ElectronState::MsMinus1,
            (true, ElectronState::MsMinus1) => ElectronState::Ms0,
            _ => state,
        }
    }

    #[inline]
    fn stranded<R: Rng + ?Sized>(rng: &mut R) -> ElectronState {
        if rng.random::<bool>() {
            ElectronState::MsMinus1
        } else {
            ElectronState::MsPlus1
        }
    }

    /// Walks one attempt, reporting every segment to `sink`.
    #[inline]
    pub fn run<R: Rng + ?Sized, S: SegmentSink>(&self, entry: ElectronState, rng: &mut R, sink: &mut S) -> AttemptFlags {
        let tm = &self.timing;
        let mut mw_failed = false;
        let mut state = Self::microwave(entry, tm.flip_probability, self.p_mw_alpha, rng, &mut mw_failed);
        sink.segment(state, tm.inter_pulse_delay);
        if tm.has_middle_pi {
            state = Self::microwave(state, 1.0, self.p_mw, rng, &mut mw_failed);
            sink.segment(state, tm.inter_pulse_delay);
        }

        let mut reset = None;
        let failed = if state.is_bright() {
            let dwell = if self.mean_dwell > 0.0 { self.mean_dwell * rng.sample::<f64, _>(Exp1) } else { 0.0 };
            if dwell < tm.repump_duration {
                sink.segment(state, dwell);
                sink.segment(ElectronState::Ms0, tm.repump_duration - dwell);
                reset = Some(ResetEvent { from: state, dwell });
                self.p_floor_bright > 0.0 && rng.random::<f64>() < self.p_floor_bright
            } else {
                sink.segment(state, tm.repump_duration);
                true
            }
        } else {
            sink.segment(ElectronState::Ms0, tm.repump_duration);
            self.p_init > 0.0 && rng.random::<f64>() < self.p_init
        };
        state = if failed { Self::stranded(rng) } else { ElectronState::Ms0 };
        sink.segment(state, tm.tail);
        AttemptFlags { exit: state, init_failed: failed, mw_failed, reset }
    }
}

/// Realizes one attempt as an explicit electron trajectory.
pub fn realize_attempt<R: Rng + ?Sized>(
    timing: &ResolvedAttempt,
    noise: &NoiseModel,
    entry: ElectronState,
    rng: &mut R,
    ctx: &RunContext,
) -> Result<AttemptOutcome> {
    if !entry.is_ground_triplet() {
        return Err(Error::InvalidState(entry));
    }
    noise.validate()?;
    let prepared = PreparedAttempt::new(timing, noise, ctx);
    let mut trajectory = ElectronTrajectory::with_capacity(6);
    let flags = prepared.run(entry, rng, &mut trajectory);
    Ok(AttemptOutcome {
        trajectory,
        ended_in_ms0: flags.exit == ElectronState::Ms0,
        init_failed: flags.init_failed,
        mw_failed: flags.mw_failed,
        reset: flags.reset,
    })
}

/// One analytic outcome of the echoed attempt: electron states around the
/// middle R(pi), its probability and the absolute nuclear phase over 2t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseBranch {
    pub before: ElectronState,
    pub after: ElectronState,
    pub probability: f64,
    pub phase: f64,
}

/// The three outcomes of R(pi/2) - t - R(pi) - t with a failure-prone R(pi).
pub fn attempt_phase_branches(
    seq: &AttemptSequence,
    noise: &NoiseModel,
    spin: &NuclearSpinParams,
    field: &FieldParams,
) -> Result<Vec<PhaseBranch>> {
    if !seq.has_middle_pi || (seq.alpha - FRAC_PI_2).abs() > 1e-9 {
        return Err(Error::UnsupportedSequence(
            "phase branches are defined for R(pi/2) followed by an electron echo".into(),
        ));
    }
    noise.validate()?;
    let t = seq.inter_pulse_delay.resolve(spin, field)?;
    let w0 = field.larmor();
    let wm = crate::physics::precession_frequency(ElectronState::MsMinus1, spin, field)?;
    let p = noise.p_mw;
    let branches = [
        (ElectronState::Ms0, ElectronState::Ms0, 0.5 * p, 2.0 * w0 * t),
        (ElectronState::MsMinus1, ElectronState::MsMinus1, 0.5 * p, 2.0 * wm * t),
        (ElectronState::Ms0, ElectronState::MsMinus1, 1.0 - p, (w0 + wm) * t),
    ];
    Ok(branches
        .into_iter()
        .filter(|b| b.2 > 0.0)
        .map(|(before, after, probability, phase)| PhaseBranch { before, after, probability, phase })
        .collect())
}
