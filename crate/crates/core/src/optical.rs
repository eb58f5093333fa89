//! Quantum-jump simulation of the optical cycle behind pump-probe experiments.
//!
//! Levels: ground triplet {ms0, ms-1, ms+1}, the excited level E' reached from
//! ms=+-1, and the metastable singlet S. While a pump pulse is on, the driven
//! pair (ms=+-1, E') evolves coherently under the non-Hermitian Hamiltonian
//! `Omega(t)/2 sigma_x - i Gamma/2 |E'><E'|` and decays by waiting-time jumps:
//! radiatively back to the originating ground state or by intersystem crossing
//! to S. At the end of a pulse the pair is projected onto its populations.
//! Between pulses all rates are constant and the path advances by exact
//! exponential waiting times. S decays with the configured branching.

use nalgebra::Complex;
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check, Error, Result};
use crate::fitting::{fit_exponential, Direction, FitOptions, FitResult, Observation};
use crate::physics::ElectronState;
use crate::rng::{trial_stream, TrialRng};

/// Rate difference 1/t_E' - 1/t_Ex + Gamma_xs (1/s) attributed to intersystem crossing from E'.
pub fn isc_rate_from_lifetimes(t_ex: f64, t_e_prime: f64) -> Result<f64> {
    check(t_ex > 0.0 && t_e_prime > 0.0, "lifetimes", || "must be positive".into())?;
    if t_e_prime >= t_ex {
        return Err(Error::NonPhysical(format!(
            "t_E' = {t_e_prime} s is not shorter than t_Ex = {t_ex} s; the ISC rate would be negative"
        )));
    }
    Ok(1.0 / t_e_prime - 1.0 / t_ex)
}

/// Decay probabilities out of the singlet into ms0, ms+1 and ms-1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branching {
    pub b0: f64,
    pub b_plus: f64,
    pub b_minus: f64,
}

impl Branching {
    /// Normalizes the ratio r0 : r_plus : r_minus.
    pub fn from_ratio(r0: f64, r_plus: f64, r_minus: f64) -> Result<Self> {
        check(r0 >= 0.0 && r_plus >= 0.0 && r_minus >= 0.0, "branching", || "entries must be >= 0".into())?;
        let sum = r0 + r_plus + r_minus;
        check(sum > 0.0, "branching", || "entries must not all vanish".into())?;
        Ok(Self { b0: r0 / sum, b_plus: r_plus / sum, b_minus: r_minus / sum })
    }

    /// b0 into ms0, the rest split evenly between ms=+-1.
    pub fn symmetric(b0: f64) -> Result<Self> {
        check((0.0..=1.0).contains(&b0), "b0", || format!("must lie in [0, 1], got {b0}"))?;
        Ok(Self { b0, b_plus: 0.5 * (1.0 - b0), b_minus: 0.5 * (1.0 - b0) })
    }

    /// The ratio normalized to the ms-1 entry, e.g. (8, 1, 1).
    pub fn ratio(&self) -> (f64, f64, f64) {
        (self.b0 / self.b_minus, self.b_plus / self.b_minus, 1.0)
    }

    pub fn is_symmetric(&self) -> bool {
        (self.b_plus - self.b_minus).abs() <= 1e-12
    }

    pub fn validate(&self) -> Result<()> {
        check(self.b0 >= 0.0 && self.b_plus >= 0.0 && self.b_minus >= 0.0, "branching", || "entries must be >= 0".into())?;
        check((self.b0 + self.b_plus + self.b_minus - 1.0).abs() < 1e-9, "branching", || "entries must sum to 1".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalLevelModel {
    /// Radiative lifetime of E_x (s).
    pub t_ex: f64,
    /// Lifetime of E' (s).
    pub t_e_prime: f64,
    /// ISC rate out of E' (1/s).
    pub gamma_es: f64,
    /// ISC rate out of E_x (1/s).
    #[serde(default)]
    pub gamma_xs: f64,
    /// Singlet lifetime (s).
    pub t_s: f64,
    pub branching: Branching,
    /// Strain-induced shift of E_x (Hz); carried along, not used in the dynamics.
    #[serde(default)]
    pub strain_shift: f64,
}

impl OpticalLevelModel {
    /// Lifetimes 12.3 ns / 7.4 ns, singlet 368 ns, branching 8:1:1, ISC rate from the lifetimes.
    pub fn reference() -> Self {
        let (t_ex, t_e_prime) = (12.3e-9, 7.4e-9);
        Self {
            t_ex,
            t_e_prime,
            gamma_es: isc_rate_from_lifetimes(t_ex, t_e_prime).expect("reference lifetimes are ordered"),
            gamma_xs: 0.0,
            t_s: 368e-9,
            branching: Branching::from_ratio(8.0, 1.0, 1.0).expect("valid ratio"),
            strain_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.t_ex > 0.0 && self.t_e_prime > 0.0 && self.t_s > 0.0, "lifetimes", || "must be positive".into())?;
        check(self.gamma_es >= 0.0 && self.gamma_xs >= 0.0, "isc rates", || "must be >= 0".into())?;
        if self.gamma_es > 1.0 / self.t_e_prime {
            return Err(Error::NonPhysical("ISC rate exceeds the total E' decay rate".into()));
        }
        self.branching.validate()
    }

    /// Total decay rate of E' (1/s).
    pub fn total_rate(&self) -> f64 {
        1.0 / self.t_e_prime
    }

    /// Probability that one excitation of E' ends in the singlet.
    pub fn single_excitation_p_s(&self) -> f64 {
        self.gamma_es * self.t_e_prime
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum PulseShape {
    /// Gaussian intensity profile; the Rabi frequency follows sqrt(intensity).
    Gaussian { fwhm: f64 },
    Square { duration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseEnvelope {
    #[serde(flatten)]
    pub shape: PulseShape,
    /// Peak Rabi frequency (rad/s); `None` calibrates a pi pulse.
    #[serde(default)]
    pub peak_rabi: Option<f64>,
    /// Pulse centre (s).
    #[serde(default)]
    pub center: f64,
}

/// Gaussian pulses are integrated over +-this many Rabi-envelope widths.
const GAUSSIAN_HALF_WIDTHS: f64 = 6.0;

impl PulseEnvelope {
    /// Calibrated pi pulse with a 2.6 ns FWHM Gaussian intensity centred at t = 0.
    pub fn reference_pi() -> Self {
        Self { shape: PulseShape::Gaussian { fwhm: 2.6e-9 }, peak_rabi: None, center: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let w = match self.shape {
            PulseShape::Gaussian { fwhm } => fwhm,
            PulseShape::Square { duration } => duration,
        };
        check(w > 0.0 && w.is_finite(), "pulse width", || format!("must be positive, got {w}"))?;
        if let Some(o) = self.peak_rabi {
            check(o >= 0.0 && o.is_finite(), "peak_rabi", || "must be >= 0".into())?;
        }
        Ok(())
    }

    /// Width of the Rabi-frequency envelope (s): sqrt(2) x the intensity sigma.
    fn rabi_sigma(fwhm: f64) -> f64 {
        std::f64::consts::SQRT_2 * fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.peak_rabi.unwrap_or(match self.shape {
            PulseShape::Gaussian { fwhm } => PI / (Self::rabi_sigma(fwhm) * (2.0 * PI).sqrt()),
            PulseShape::Square { duration } => PI / duration,
        })
    }

    /// Time interval over which the drive is integrated.
    pub fn window(&self) -> (f64, f64) {
        let half = match self.shape {
            PulseShape::Gaussian { fwhm } => GAUSSIAN_HALF_WIDTHS * Self::rabi_sigma(fwhm),
            PulseShape::Square { duration } => 0.5 * duration,
        };
        (self.center - half, self.center + half)
    }

    /// Rabi frequency at time t (rad/s).
    pub fn rabi(&self, t: f64) -> f64 {
        let (lo, hi) = self.window();
        if t < lo || t > hi {
            return 0.0;
        }
        match self.shape {
            PulseShape::Gaussian { fwhm } => {
                let s = Self::rabi_sigma(fwhm);
                self.peak() * (-0.5 * ((t - self.center) / s).powi(2)).exp()
            }
            PulseShape::Square { .. } => self.peak(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StepControl {
    /// Step chosen so that max(rate) * dt stays at or below the bound.
    Adaptive { max_rate_dt: f64 },
    /// Fixed step (s); rejected when max(rate) * dt exceeds 0.1.
    Fixed { dt: f64 },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::Adaptive { max_rate_dt: 0.05 }
    }
}

const MAX_RATE_DT: f64 = 0.1;

impl StepControl {
    fn check(&self, max_rate: f64) -> Result<()> {
        match *self {
            StepControl::Adaptive { max_rate_dt } => {
                check(max_rate_dt > 0.0 && max_rate_dt <= MAX_RATE_DT, "max_rate_dt", || {
                    format!("must lie in (0, {MAX_RATE_DT}], got {max_rate_dt}")
                })
            }
            StepControl::Fixed { dt } => {
                check(dt > 0.0, "dt", || "must be positive".into())?;
                if max_rate * dt > MAX_RATE_DT {
                    return Err(Error::StepTooLarge { rate_dt: max_rate * dt });
                }
                Ok(())
            }
        }
    }

    #[inline]
    fn step(&self, rate: f64) -> f64 {
        match *self {
            StepControl::Adaptive { max_rate_dt } => max_rate_dt / rate,
            StepControl::Fixed { dt } => dt,
        }
    }
}

/// Time-stamped state changes of one trajectory, starting with the initial state.
/// Inside a driven window the path keeps the pre-pulse ground state until a
/// jump or the end-of-pulse projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpPath {
    pub events: Vec<(f64, ElectronState)>,
    pub horizon: f64,
    /// Excitations to E' (decays out of E' plus an end-of-pulse projection onto it).
    pub excitations: u32,
    pub reached_singlet: bool,
}

impl JumpPath {
    pub fn state_at(&self, t: f64) -> ElectronState {
        let i = self.events.partition_point(|(s, _)| *s <= t);
        self.events[i.saturating_sub(1)].1
    }

    /// Time spent in `state` within [a, b].
    pub fn time_in(&self, state: ElectronState, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for (k, &(start, s)) in self.events.iter().enumerate() {
            let end = self.events.get(k + 1).map_or(f64::INFINITY, |e| e.0);
            if s == state {
                total += (end.min(b) - start.max(a)).max(0.0);
            }
        }
        total
    }

    pub fn final_state(&self) -> ElectronState {
        self.events.last().expect("path has an initial state").1
    }
}

struct Walker<'a> {
    model: &'a OpticalLevelModel,
    step: StepControl,
    events: Vec<(f64, ElectronState)>,
    excitations: u32,
    singlet: bool,
}

impl Walker<'_> {
    fn push(&mut self, t: f64, s: ElectronState) {
        if self.events.last().map(|e| e.1) != Some(s) {
            self.events.push((t, s));
        }
    }

    /// Where E' decays to: the originating ground state or S.
    fn decay_target<R: Rng + ?Sized>(&self, origin: ElectronState, rng: &mut R) -> ElectronState {
        if rng.random::<f64>() * self.model.total_rate() < self.model.gamma_es {
            ElectronState::Singlet
        } else {
            origin
        }
    }

    fn singlet_target<R: Rng + ?Sized>(&self, rng: &mut R) -> ElectronState {
        let b = &self.model.branching;
        let u = rng.random::<f64>();
        if u < b.b0 {
            ElectronState::Ms0
        } else if u < b.b0 + b.b_plus {
            ElectronState::MsPlus1
        } else {
            ElectronState::MsMinus1
        }
    }

    /// Coherent driven evolution of the pair (origin, E') over [t, end].
    /// Returns the time and state after the first jump or the final projection.
    fn drive<R: Rng + ?Sized>(
        &mut self,
        pulse: &PulseEnvelope,
        origin: ElectronState,
        excited: bool,
        mut t: f64,
        end: f64,
        rng: &mut R,
    ) -> (f64, ElectronState) {
        let gamma = self.model.total_rate();
        let zero = Complex::new(0.0, 0.0);
        let one = Complex::new(1.0, 0.0);
        let (mut cg, mut ce) = if excited { (zero, one) } else { (one, zero) };
        let mut threshold: f64 = rng.random();
        let deriv = |o: f64, g: Complex<f64>, e: Complex<f64>| {
            let h = Complex::new(0.0, -0.5 * o);
            (h * e, h * g - 0.5 * gamma * e)
        };
        while t < end {
            let rate = gamma.max(pulse.rabi(t)).max(pulse.rabi((t + 0.5 * self.step.step(gamma)).min(end)));
            let dt = self.step.step(rate).min(end - t);
            let (o0, o1, o2) = (pulse.rabi(t), pulse.rabi(t + 0.5 * dt), pulse.rabi(t + dt));
            let (k1g, k1e) = deriv(o0, cg, ce);
            let (k2g, k2e) = deriv(o1, cg + k1g * (0.5 * dt), ce + k1e * (0.5 * dt));
            let (k3g, k3e) = deriv(o1, cg + k2g * (0.5 * dt), ce + k2e * (0.5 * dt));
            let (k4g, k4e) = deriv(o2, cg + k3g * dt, ce + k3e * dt);
            let ng = cg + (k1g + k2g * 2.0 + k3g * 2.0 + k4g) * (dt / 6.0);
            let ne = ce + (k1e + k2e * 2.0 + k3e * 2.0 + k4e) * (dt / 6.0);
            let before = cg.norm_sqr() + ce.norm_sqr();
            let after = ng.norm_sqr() + ne.norm_sqr();
            if after < threshold {
                let f = ((before - threshold) / (before - after)).clamp(0.0, 1.0);
                let tj = t + f * dt;
                self.excitations += 1;
                let target = self.decay_target(origin, rng);
                if target == ElectronState::Singlet {
                    return (tj, target);
                }
                // radiative decay back to the ground state; drive continues
                self.push(tj, origin);
                cg = one;
                ce = zero;
                threshold = rng.random();
                t = tj;
                continue;
            }
            cg = ng;
            ce = ne;
            t += dt;
        }
        let norm = cg.norm_sqr() + ce.norm_sqr();
        if rng.random::<f64>() * norm < ce.norm_sqr() {
            self.excitations += 1;
            (end, ElectronState::ExcitedEPrime)
        } else {
            (end, origin)
        }
    }
}

/// Simulates one trajectory from `initial` (ms0 or ms-1) under `pulses` up to `horizon`.
pub fn jump_trajectory<R: Rng + ?Sized>(
    model: &OpticalLevelModel,
    pulses: &[PulseEnvelope],
    initial: ElectronState,
    horizon: f64,
    step: StepControl,
    rng: &mut R,
) -> Result<JumpPath> {
    model.validate()?;
    if !matches!(initial, ElectronState::Ms0 | ElectronState::MsMinus1 | ElectronState::MsPlus1) {
        return Err(Error::InvalidState(initial));
    }
    let mut sorted = pulses.to_vec();
    for p in &sorted {
        p.validate()?;
        step.check(p.peak().max(model.total_rate()))?;
    }
    sorted.sort_by(|a, b| a.window().0.total_cmp(&b.window().0));
    let start = sorted.first().map_or(0.0, |p| p.window().0.min(0.0));
    let last_end = sorted.last().map_or(start, |p| p.window().1);
    check(horizon >= last_end, "horizon", || format!("{horizon} s ends before the last pulse at {last_end} s"))?;
    Ok(walk(model, &sorted, initial, start, horizon, step, rng))
}

fn walk<R: Rng + ?Sized>(
    model: &OpticalLevelModel,
    pulses: &[PulseEnvelope],
    initial: ElectronState,
    start: f64,
    horizon: f64,
    step: StepControl,
    rng: &mut R,
) -> JumpPath {
    let mut w = Walker { model, step, events: vec![(start, initial)], excitations: 0, singlet: false };
    let mut t = start;
    let mut state = initial;
    // ground state the E' population came from
    let mut origin = ElectronState::MsMinus1;
    let gamma = model.total_rate();
    while t < horizon {
        let next = pulses.iter().find(|p| p.window().1 > t);
        let in_window = next.filter(|p| p.window().0 <= t);
        match state {
            ElectronState::MsMinus1 | ElectronState::MsPlus1 => {
                let Some(p) = next else { break };
                let (lo, hi) = p.window();
                origin = state;
                let (tn, sn) = w.drive(p, state, false, t.max(lo), hi, rng);
                t = tn;
                state = sn;
            }
            ElectronState::ExcitedEPrime => match in_window {
                Some(p) => {
                    let (tn, sn) = w.drive(p, origin, true, t, p.window().1, rng);
                    t = tn;
                    state = sn;
                }
                None => {
                    let td = t + rng.sample::<f64, _>(Exp1) / gamma;
                    match next {
                        Some(p) if p.window().0 < td => t = p.window().0,
                        _ => {
                            if td >= horizon {
                                break;
                            }
                            t = td;
                            state = w.decay_target(origin, rng);
                        }
                    }
                }
            },
            ElectronState::Singlet => {
                let td = t + model.t_s * rng.sample::<f64, _>(Exp1);
                if td >= horizon {
                    break;
                }
                t = td;
                state = w.singlet_target(rng);
            }
            _ => break,
        }
        if state == ElectronState::Singlet {
            w.singlet = true;
        }
        if t < horizon {
            w.push(t, state);
        }
    }
    JumpPath { events: w.events, horizon, excitations: w.excitations, reached_singlet: w.singlet }
}

/// How F(|0>) is read from a trajectory for a probe starting at the delay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Occupation of ms0 when the probe window opens.
    #[default]
    Onset,
    /// Fraction of the probe window spent in ms0.
    WindowAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpProbeConfig {
    pub pump: PulseEnvelope,
    /// Delays of the probe-window start after the pump centre (s).
    pub delays: Vec<f64>,
    pub probe_window: f64,
    pub trials: u64,
    pub seed: u64,
    pub mode: ProbeMode,
    pub step: StepControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpProbePoint {
    pub delay: f64,
    pub f0: f64,
    pub std_err: f64,
}

/// Per-pulse statistics of the pump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationStats {
    pub trials: u64,
    /// Probability of reaching S.
    pub p_s: f64,
    pub p_s_err: f64,
    /// Probability of at least two excitations.
    pub p_double: f64,
    pub p_double_err: f64,
    /// Probability of at least one excitation.
    pub p_excited: f64,
    pub mean_excitations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpProbeCurve {
    pub points: Vec<PumpProbePoint>,
    /// Earliest delay used by the rise fit: E' must have emptied, otherwise
    /// the two-step refill puts the first points below a single exponential.
    pub fit_from: f64,
    pub stats: ExcitationStats,
    pub seed: u64,
}

impl PumpProbeCurve {
    pub fn observations(&self) -> Vec<Observation> {
        self.points.iter().map(|p| Observation::with_sigma(p.delay, p.f0, p.std_err)).collect()
    }

    /// Exponential-rise fit with a free offset over the delays from `fit_from` on.
    pub fn fit_rise(&self, opts: &FitOptions) -> Result<FitResult> {
        let obs: Vec<Observation> = self.observations().into_iter().filter(|o| o.x >= self.fit_from).collect();
        fit_exponential(&obs, Direction::Rise, opts)
    }
}

const OPTICAL_BLOCK: u64 = 256;

/// E' lifetimes simulated after the pump so that p_s counts late ISC events.
const SETTLE_LIFETIMES: f64 = 60.0;

/// E' lifetimes after the pump before delays enter the rise fit.
const FIT_LIFETIMES: f64 = 5.0;

#[derive(Clone, Default)]
struct OpticalSums {
    f0: Vec<f64>,
    f0_sq: Vec<f64>,
    singlet: u64,
    double: u64,
    excited: u64,
    excitations: u64,
}

impl OpticalSums {
    fn merge(&mut self, o: &OpticalSums) {
        if self.f0.is_empty() {
            self.f0 = vec![0.0; o.f0.len()];
            self.f0_sq = vec![0.0; o.f0.len()];
        }
        for k in 0..o.f0.len() {
            self.f0[k] += o.f0[k];
            self.f0_sq[k] += o.f0_sq[k];
        }
        self.singlet += o.singlet;
        self.double += o.double;
        self.excited += o.excited;
        self.excitations += o.excitations;
    }
}

fn binomial_err(p: f64, n: f64) -> f64 {
    (p * (1.0 - p) / n).sqrt().max(1.0 / n)
}

/// Pump from ms-1, probe F(|0>) at every delay.
pub fn pump_probe_curve(model: &OpticalLevelModel, cfg: &PumpProbeConfig) -> Result<PumpProbeCurve> {
    model.validate()?;
    cfg.pump.validate()?;
    cfg.step.check(cfg.pump.peak().max(model.total_rate()))?;
    check(cfg.trials >= 1, "trials", || "must be at least 1".into())?;
    check(cfg.probe_window >= 0.0, "probe_window", || "must be >= 0".into())?;
    check(cfg.delays.iter().all(|&d| d >= 0.0 && d.is_finite()), "delays", || "must be >= 0".into())?;
    let max_delay = cfg.delays.iter().fold(0.0f64, |m, &d| m.max(d));
    // long enough for every E' population left by the pump to decay
    let settle = cfg.pump.window().1 + SETTLE_LIFETIMES * model.t_e_prime;
    let horizon = (cfg.pump.center + max_delay + cfg.probe_window).max(settle);
    let pulses = [cfg.pump];
    let start = cfg.pump.window().0.min(0.0);
    let blocks = cfg.trials.div_ceil(OPTICAL_BLOCK);
    let partial: Vec<OpticalSums> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut s = OpticalSums { f0: vec![0.0; cfg.delays.len()], f0_sq: vec![0.0; cfg.delays.len()], ..Default::default() };
            for trial in b * OPTICAL_BLOCK..((b + 1) * OPTICAL_BLOCK).min(cfg.trials) {
                let mut rng: TrialRng = trial_stream(cfg.seed, trial);
                let path = walk(model, &pulses, ElectronState::MsMinus1, start, horizon, cfg.step, &mut rng);
                for (k, &d) in cfg.delays.iter().enumerate() {
                    let t = cfg.pump.center + d;
                    let v = match cfg.mode {
                        ProbeMode::Onset => f64::from(u8::from(path.state_at(t) == ElectronState::Ms0)),
                        ProbeMode::WindowAverage if cfg.probe_window > 0.0 => {
                            path.time_in(ElectronState::Ms0, t, t + cfg.probe_window) / cfg.probe_window
                        }
                        ProbeMode::WindowAverage => f64::from(u8::from(path.state_at(t) == ElectronState::Ms0)),
                    };
                    s.f0[k] += v;
                    s.f0_sq[k] += v * v;
                }
                s.singlet += u64::from(path.reached_singlet);
                s.double += u64::from(path.excitations >= 2);
                s.excited += u64::from(path.excitations >= 1);
                s.excitations += u64::from(path.excitations);
            }
            s
        })
        .collect();
    let mut total = OpticalSums::default();
    for p in &partial {
        total.merge(p);
    }
    let n = cfg.trials as f64;
    let points = cfg
        .delays
        .iter()
        .enumerate()
        .map(|(k, &delay)| {
            let mean = total.f0[k] / n;
            let var = if n > 1.0 { ((total.f0_sq[k] - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
            PumpProbePoint { delay, f0: mean, std_err: (var / n).sqrt().max(1.0 / n) }
        })
        .collect();
    let p_s = total.singlet as f64 / n;
    let p_double = total.double as f64 / n;
    let stats = ExcitationStats {
        trials: cfg.trials,
        p_s,
        p_s_err: binomial_err(p_s, n),
        p_double,
        p_double_err: binomial_err(p_double, n),
        p_excited: total.excited as f64 / n,
        mean_excitations: total.excitations as f64 / n,
    };
    let fit_from = cfg.pump.window().1 - cfg.pump.center + FIT_LIFETIMES * model.t_e_prime;
    Ok(PumpProbeCurve { points, fit_from, stats, seed: cfg.seed })
}

/// Pump statistics only (no probe).
pub fn excitation_stats(model: &OpticalLevelModel, pump: &PulseEnvelope, trials: u64, seed: u64, step: StepControl) -> Result<ExcitationStats> {
    let cfg = PumpProbeConfig { pump: *pump, delays: Vec::new(), probe_window: 0.0, trials, seed, mode: ProbeMode::Onset, step };
    Ok(pump_probe_curve(model, &cfg)?.stats)
}

/// Branching from the long-delay asymptote F0 and the singlet probability p_s,
/// assuming a single pass through S: b0 = F0 / p_s, b+ = b- = (1 - b0)/2.
pub fn branching_from_measurement(p_s: f64, f0_asymptote: f64, symmetric: bool) -> Result<Branching> {
    if !symmetric {
        return Err(Error::OutOfDomain(
            "one asymptote fixes only b0; an asymmetric split of the ms=+-1 branches is not identifiable".into(),
        ));
    }
    check(p_s > 0.0 && p_s <= 1.0, "p_s", || format!("must lie in (0, 1], got {p_s}"))?;
    if !(f0_asymptote > 0.0 && f0_asymptote <= p_s) {
        return Err(Error::OutOfDomain(format!("F0 = {f0_asymptote} must lie in (0, p_s = {p_s}]")));
    }
    Branching::symmetric(f0_asymptote / p_s)
}

/// Both inversions of a measured asymptote: with the single-excitation
/// p_s = Gamma_es t_E', and with p_s from the jump simulation of the pump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchingEstimate {
    pub p_s_single: f64,
    pub single_excitation: Branching,
    pub p_s_jump: f64,
    pub jump: Branching,
}

pub fn branching_estimates(
    model: &OpticalLevelModel,
    pump: &PulseEnvelope,
    f0_asymptote: f64,
    trials: u64,
    seed: u64,
) -> Result<BranchingEstimate> {
    let p_s_single = model.single_excitation_p_s();
    let p_s_jump = excitation_stats(model, pump, trials, seed, StepControl::default())?.p_s;
    Ok(BranchingEstimate {
        p_s_single,
        single_excitation: branching_from_measurement(p_s_single, f0_asymptote, true)?,
        p_s_jump,
        jump: branching_from_measurement(p_s_jump, f0_asymptote, true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delays() -> Vec<f64> {
        (0..=20).map(|k| k as f64 * 100e-9).collect()
    }

    #[test]
    fn isc_rate_from_reference_lifetimes() {
        let g = isc_rate_from_lifetimes(12.3e-9, 7.4e-9).unwrap();
        let mhz = g / (2.0 * PI) / 1e6;
        assert!((8.5..8.65).contains(&mhz), "{mhz}");
        let half = isc_rate_from_lifetimes(10e-9, 5e-9).unwrap();
        assert!((half - 1.0 / 10e-9).abs() < 1e-3);
        assert!(matches!(isc_rate_from_lifetimes(7e-9, 7e-9), Err(Error::NonPhysical(_))));
    }

    #[test]
    fn pi_pulse_area() {
        let p = PulseEnvelope::reference_pi();
        let (lo, hi) = p.window();
        let n = 20_000;
        let dt = (hi - lo) / n as f64;
        let area: f64 = (0..n).map(|k| p.rabi(lo + (k as f64 + 0.5) * dt) * dt).sum();
        assert!((area - PI).abs() < 1e-6, "{area}");
        // intensity FWHM
        let half = p.rabi(1.3e-9).powi(2) / p.peak().powi(2);
        assert!((half - 0.5).abs() < 1e-9);
    }

    #[test]
    fn lossless_pi_pulse_inverts() {
        // no decay within the pulse: a near-instant square pi pulse always excites
        let model = OpticalLevelModel { t_e_prime: 1.0, t_ex: 2.0, gamma_es: 0.0, ..OpticalLevelModel::reference() };
        let pulse = PulseEnvelope { shape: PulseShape::Square { duration: 1e-9 }, peak_rabi: None, center: 0.0 };
        let mut rng = trial_stream(1, 0);
        for _ in 0..100 {
            let path = jump_trajectory(&model, &[pulse], ElectronState::MsMinus1, 1e-9, StepControl::default(), &mut rng).unwrap();
            assert_eq!(path.final_state(), ElectronState::ExcitedEPrime);
        }
    }

    #[test]
    fn no_isc_means_no_spin_flip() {
        let model = OpticalLevelModel { gamma_es: 0.0, ..OpticalLevelModel::reference() };
        let pulse = PulseEnvelope::reference_pi();
        for i in 0..2000 {
            let mut rng = trial_stream(2, i);
            let path = jump_trajectory(&model, &[pulse], ElectronState::MsMinus1, 500e-9, StepControl::default(), &mut rng).unwrap();
            assert_eq!(path.final_state(), ElectronState::MsMinus1);
            assert!(path.events.iter().all(|e| e.1 != ElectronState::Ms0));
        }
    }

    #[test]
    fn ms0_is_dark_to_the_pump() {
        let mut rng = trial_stream(3, 0);
        let path = jump_trajectory(
            &OpticalLevelModel::reference(),
            &[PulseEnvelope::reference_pi()],
            ElectronState::Ms0,
            100e-9,
            StepControl::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(path.events.len(), 1);
        assert_eq!(path.excitations, 0);
    }

    #[test]
    fn coarse_fixed_step_rejected() {
        let mut rng = trial_stream(3, 0);
        let r = jump_trajectory(
            &OpticalLevelModel::reference(),
            &[PulseEnvelope::reference_pi()],
            ElectronState::MsMinus1,
            100e-9,
            StepControl::Fixed { dt: 1e-9 },
            &mut rng,
        );
        assert!(matches!(r, Err(Error::StepTooLarge { .. })));
        assert!(jump_trajectory(
            &OpticalLevelModel::reference(),
            &[PulseEnvelope::reference_pi()],
            ElectronState::MsMinus1,
            100e-9,
            StepControl::Fixed { dt: 0.05e-9 },
            &mut rng,
        )
        .is_ok());
    }

    #[test]
    fn fixed_and_adaptive_steps_agree() {
        let model = OpticalLevelModel::reference();
        let pump = PulseEnvelope::reference_pi();
        let a = excitation_stats(&model, &pump, 20_000, 9, StepControl::default()).unwrap();
        let f = excitation_stats(&model, &pump, 20_000, 10, StepControl::Fixed { dt: 0.02e-9 }).unwrap();
        assert!((a.p_s - f.p_s).abs() < 4.0 * (a.p_s_err + f.p_s_err));
        assert!((a.p_double - f.p_double).abs() < 4.0 * (a.p_double_err + f.p_double_err));
    }

    #[test]
    fn reference_pump_statistics() {
        let s = excitation_stats(&OpticalLevelModel::reference(), &PulseEnvelope::reference_pi(), 40_000, 4, StepControl::default()).unwrap();
        assert!((0.38..=0.44).contains(&s.p_s), "{s:?}");
        assert!((0.03..=0.07).contains(&s.p_double), "{s:?}");
    }

    #[test]
    fn excited_population_decays_at_the_e_prime_rate() {
        let model = OpticalLevelModel::reference();
        let pump = PulseEnvelope::reference_pi();
        let end = pump.window().1;
        let times: Vec<f64> = (0..12).map(|k| end + k as f64 * 2e-9).collect();
        let n = 40_000u64;
        let mut occ = vec![0.0; times.len()];
        for i in 0..n {
            let mut rng = trial_stream(6, i);
            let path = jump_trajectory(&model, &[pump], ElectronState::MsMinus1, end + 30e-9, StepControl::default(), &mut rng).unwrap();
            for (o, &t) in occ.iter_mut().zip(&times) {
                *o += f64::from(u8::from(path.state_at(t) == ElectronState::ExcitedEPrime));
            }
        }
        let obs: Vec<Observation> = times
            .iter()
            .zip(&occ)
            .map(|(&t, &c)| {
                let p = c / n as f64;
                Observation::with_sigma(t - end, p, binomial_err(p, n as f64))
            })
            .collect();
        let fit = fit_exponential(&obs, Direction::Decay, &FitOptions::default()).unwrap();
        assert!((fit.value("timescale") / 7.4e-9 - 1.0).abs() < 0.04, "{fit:?}");
    }

    #[test]
    fn pump_probe_rise_and_asymptote() {
        let cfg = PumpProbeConfig {
            pump: PulseEnvelope::reference_pi(),
            delays: delays(),
            probe_window: 40e-9,
            trials: 20_000,
            seed: 12,
            mode: ProbeMode::Onset,
            step: StepControl::default(),
        };
        let model = OpticalLevelModel::reference();
        let curve = pump_probe_curve(&model, &cfg).unwrap();
        assert!(curve.points[0].f0 <= 0.01);
        let fit = curve.fit_rise(&FitOptions::default()).unwrap();
        assert!((fit.value("timescale") / 368e-9 - 1.0).abs() < 0.1, "{fit:?}");
        let asym = fit.value("amplitude") + fit.value("offset");
        let expect = curve.stats.p_s * 0.8;
        assert!((asym - expect).abs() < 0.02, "{asym} vs {expect}");
        // the window-averaged probe is never below the onset reading at the same delay
        let avg = pump_probe_curve(&model, &PumpProbeConfig { mode: ProbeMode::WindowAverage, ..cfg.clone() }).unwrap();
        for (a, b) in curve.points.iter().zip(&avg.points) {
            assert!(b.f0 + 1e-12 >= a.f0);
        }
    }

    #[test]
    fn deterministic_under_thread_count() {
        let cfg = PumpProbeConfig {
            pump: PulseEnvelope::reference_pi(),
            delays: vec![0.0, 200e-9, 1000e-9],
            probe_window: 40e-9,
            trials: 3000,
            seed: 1,
            mode: ProbeMode::Onset,
            step: StepControl::default(),
        };
        let model = OpticalLevelModel::reference();
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| pump_probe_curve(&model, &cfg)).unwrap();
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| pump_probe_curve(&model, &cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn branching_inversion_examples() {
        let lit = branching_from_measurement(0.41, 0.205, true).unwrap();
        let (r0, rp, rm) = lit.ratio();
        assert!((r0 - 2.0).abs() < 1e-9 && (rp - 1.0).abs() < 1e-12 && rm == 1.0);
        let full = branching_from_measurement(0.41, 0.41, true).unwrap();
        assert!((full.b0 - 1.0).abs() < 1e-12);
        assert!(branching_from_measurement(0.41, 0.5, true).is_err());
        assert!(branching_from_measurement(0.41, 0.0, true).is_err());
        assert!(branching_from_measurement(0.41, 0.2, false).is_err());
        let b = Branching::from_ratio(11.0, 1.0, 1.0).unwrap();
        let back = branching_from_measurement(0.41, 0.41 * b.b0, true).unwrap();
        assert!((back.ratio().0 - 11.0).abs() < 1e-9);
    }

    #[test]
    fn branching_round_trips_through_the_simulator() {
        let pump = PulseEnvelope::reference_pi();
        for b0 in [0.5, 0.8, 0.95] {
            let model = OpticalLevelModel { branching: Branching::symmetric(b0).unwrap(), ..OpticalLevelModel::reference() };
            let cfg = PumpProbeConfig {
                pump,
                delays: vec![3000e-9, 3500e-9, 4000e-9],
                probe_window: 40e-9,
                trials: 20_000,
                seed: 21,
                mode: ProbeMode::Onset,
                step: StepControl::default(),
            };
            let curve = pump_probe_curve(&model, &cfg).unwrap();
            // remaining singlet population at 3-4 us is below 0.01 %
            let f0 = curve.points.iter().map(|p| p.f0).sum::<f64>() / 3.0;
            let b = branching_from_measurement(curve.stats.p_s, f0, true).unwrap();
            assert!((b.b0 - b0).abs() < 0.03, "{b0}: {b:?}");
        }
    }
}
