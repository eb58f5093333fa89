//! Closed-form coherence models.
//!
//! * stochastic-reset model: `(1 - p1 + p1 exp(-dw^2 tau^2 / 2))^N`
//! * binomial initialization-failure model, evaluated through its product form
//!   `A [(1-p) e^{i phi_0} + p/2 (e^{i phi_+1} + e^{i phi_-1})]^N`

use serde::{Deserialize, Serialize};

use crate::attempt::AttemptSequence;
use crate::error::{check, Error, Result};
use crate::physics::{precession_frequency, ElectronState, FieldParams, NuclearSpinParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlokParams {
    /// Mean electron reset time (s).
    pub tau: f64,
    /// Coupling strength (rad/s).
    pub delta_omega: f64,
    /// Probability the electron ends an attempt in ms=+-1.
    pub p1: f64,
    pub n: f64,
}

impl BlokParams {
    pub fn validate(&self) -> Result<()> {
        check((0.0..=1.0).contains(&self.p1), "p1", || format!("must lie in [0, 1], got {}", self.p1))?;
        check(self.tau >= 0.0, "tau", || "must be >= 0".into())?;
        check(self.delta_omega >= 0.0, "delta_omega", || "must be >= 0".into())?;
        check(self.n >= 0.0, "n", || "must be >= 0".into())
    }

    /// Coherence retained per attempt.
    pub fn per_attempt(&self) -> f64 {
        let x = self.delta_omega * self.tau;
        1.0 - self.p1 * (-(-0.5 * x * x).exp_m1())
    }

    /// 1/e decay constant in attempts (infinite when nothing decays).
    pub fn n_1e(&self) -> f64 {
        let x = self.delta_omega * self.tau;
        let loss = self.p1 * (-(-0.5 * x * x).exp_m1());
        if loss <= 0.0 {
            f64::INFINITY
        } else {
            -1.0 / (-loss).ln_1p()
        }
    }
}

pub fn blok_coherence(p: &BlokParams) -> f64 {
    p.per_attempt().powf(p.n)
}

/// Mean reset time that yields the decay constant `n_1e`.
pub fn tau_from_decay(n_1e: f64, delta_omega: f64, p1: f64) -> Result<f64> {
    check(n_1e > 0.0, "n_1e", || format!("must be positive, got {n_1e}"))?;
    check(delta_omega > 0.0, "delta_omega", || "must be positive".into())?;
    check(p1 > 0.0 && p1 <= 1.0, "p1", || format!("must lie in (0, 1], got {p1}"))?;
    // e^{-x^2/2} = 1 + (e^{-1/n} - 1)/p1
    let arg = 1.0 + (-1.0 / n_1e).exp_m1() / p1;
    if arg <= 0.0 {
        return Err(Error::InconsistentInputs(format!(
            "a decay constant of {n_1e} attempts cannot be reached with p1 = {p1}"
        )));
    }
    Ok((-2.0 * arg.ln()).sqrt() / delta_omega)
}

/// Per-attempt phases for the three electron exit states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchPhases {
    pub phi0: f64,
    pub phi_plus: f64,
    pub phi_minus: f64,
}

/// Per-attempt complex factor (re, im) of the binomial model.
fn attempt_factor(p_init: f64, ph: &BranchPhases) -> (f64, f64) {
    let q = 1.0 - p_init;
    let h = 0.5 * p_init;
    (
        q * ph.phi0.cos() + h * (ph.phi_plus.cos() + ph.phi_minus.cos()),
        q * ph.phi0.sin() + h * (ph.phi_plus.sin() + ph.phi_minus.sin()),
    )
}

/// (sigma_x, sigma_y) after `n` attempts with binomially distributed initialization failures.
pub fn binomial_sigma(n: u64, p_init: f64, phases: &BranchPhases, amplitude: f64) -> (f64, f64) {
    let (re, im) = attempt_factor(p_init, phases);
    let modulus = re.hypot(im);
    if modulus == 0.0 {
        return if n == 0 { (amplitude, 0.0) } else { (0.0, 0.0) };
    }
    let arg = im.atan2(re) * n as f64;
    let len = amplitude * modulus.powf(n as f64);
    (len * arg.cos(), len * arg.sin())
}

pub fn binomial_coherence(n: u64, p_init: f64, phases: &BranchPhases, amplitude: f64) -> f64 {
    let (re, im) = attempt_factor(p_init, phases);
    amplitude * re.hypot(im).powf(n as f64)
}

/// Branch phases for a failed reset followed by post-repump delay `post_repump`.
///
/// After a failed reset the electron sits in ms=+-1 for the post-repump delay
/// and then for one inter-pulse wait before the next repump. With a
/// phase-matched wait that second part vanishes modulo 2 pi; otherwise it is
/// kept as the dwell of the branch that stays bright until the repump.
/// The properly initialized branch is the phase reference (phi0 = 0).
pub fn failure_phases(
    seq: &AttemptSequence,
    spin: &NuclearSpinParams,
    field: &FieldParams,
    post_repump: f64,
) -> Result<BranchPhases> {
    let t = seq.inter_pulse_delay.resolve(spin, field)?;
    let w0 = field.larmor();
    let dwell = post_repump + t;
    Ok(BranchPhases {
        phi0: 0.0,
        phi_plus: (precession_frequency(ElectronState::MsPlus1, spin, field)? - w0) * dwell,
        phi_minus: (precession_frequency(ElectronState::MsMinus1, spin, field)? - w0) * dwell,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevivalPoint {
    pub post_repump_delay: f64,
    pub coherence: f64,
}

/// Equatorial Bloch-vector length after `n` attempts as a function of the
/// post-repump delay T. A single nuclear echo only conjugates the phases of
/// one half of the attempts, so the length is the same with or without it.
pub fn revival_curve(
    spin: &NuclearSpinParams,
    field: &FieldParams,
    seq: &AttemptSequence,
    t_grid: &[f64],
    n: u64,
    p_init: f64,
    amplitude: f64,
) -> Result<Vec<RevivalPoint>> {
    check(!t_grid.is_empty(), "t_grid", || "must not be empty".into())?;
    check((0.0..=1.0).contains(&p_init), "p_init", || "must lie in [0, 1]".into())?;
    t_grid
        .iter()
        .map(|&t| {
            let ph = failure_phases(seq, spin, field, t)?;
            Ok(RevivalPoint { post_repump_delay: t, coherence: binomial_coherence(n, p_init, &ph, amplitude) })
        })
        .collect()
}
