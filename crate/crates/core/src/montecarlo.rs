//! Ensembles of multi-attempt trials aggregated into coherence curves, and
//! parameter sweeps over them.
//!
//! A trial draws its quasi-static offsets, then runs attempts back to back,
//! carrying the electron state from one attempt into the next. Phases are in
//! the omega_0 rotating frame. Each reset out of ms=+-1 contributes
//! (omega_s - omega_0)(dwell - tau): the mean reset phase at the nominal tau is
//! a calibrated, deterministic offset and is compensated, so only the
//! fluctuation of the dwell and any run-to-run shift of tau dephase the spin.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attempt::{AttemptSequence, NoiseModel, PhaseSink, PreparedAttempt, ResolvedAttempt, RunContext};
use crate::error::{check, Error, Result};
use crate::fitting::{fit_stretched_exp, FitOptions, FitResult, Observation};
use crate::physics::{Coupling, Detunings, ElectronState, FieldParams, NuclearSpinParams, C13_GYROMAGNETIC_HZ_PER_GAUSS};
use crate::rng::{derive_seed, trial_stream, TrialRng};

/// Default cap on n_trials x max(N).
pub const DEFAULT_ATTEMPT_BUDGET: u64 = 100_000_000_000;

/// Trials per reduction block; blocks are merged in index order.
const BLOCK: u64 = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialNuclearState {
    /// |+x>, read out as the equatorial Bloch-vector length.
    #[default]
    SuperpositionX,
    /// |up>, read out as <sigma_z>.
    EigenstateUp,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub spin: NuclearSpinParams,
    pub field: FieldParams,
    pub seq: AttemptSequence,
    pub noise: NoiseModel,
    pub n_attempts_grid: Vec<u64>,
    pub n_trials: u64,
    /// Nuclear echoes spread evenly over the N attempts: 0, 1 or 2.
    pub echo_count: u8,
    pub master_seed: u64,
    #[serde(default)]
    pub initial_nuclear_state: InitialNuclearState,
    /// Multiply by the intrinsic T2 envelope (T2,Hahn with echoes, T2* without).
    #[serde(default = "yes")]
    pub intrinsic_envelope: bool,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.spin.validate()?;
        self.noise.validate()?;
        check(self.n_trials >= 1, "n_trials", || "must be at least 1".into())?;
        check(!self.n_attempts_grid.is_empty(), "n_attempts_grid", || "must not be empty".into())?;
        check(self.n_attempts_grid.windows(2).all(|w| w[0] < w[1]), "n_attempts_grid", || {
            "must be strictly increasing".into()
        })?;
        check(self.echo_count <= 2, "echo_count", || format!("must be 0, 1 or 2, got {}", self.echo_count))?;
        self.seq.resolve(&self.spin, &self.field).map(|_| ())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("run spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn max_attempts(&self) -> u64 {
        self.n_attempts_grid.last().copied().unwrap_or(0)
    }

    pub fn attempt_cost(&self) -> u64 {
        self.n_trials.saturating_mul(self.max_attempts())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherencePoint {
    pub n: u64,
    pub coherence: f64,
    pub std_err: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCurve {
    pub points: Vec<CoherencePoint>,
    pub digest: String,
    pub master_seed: u64,
    pub n_trials: u64,
}

impl CoherenceCurve {
    pub fn observations(&self) -> Vec<Observation> {
        self.points.iter().map(|p| Observation::with_sigma(p.n as f64, p.coherence, p.std_err)).collect()
    }
}

/// Attempt allowance shared by several runs; each run draws its full cost up front.
#[derive(Debug, Clone)]
pub struct SharedBudget(Arc<AtomicU64>);

impl SharedBudget {
    pub fn new(total: u64) -> Self {
        Self(Arc::new(AtomicU64::new(total)))
    }

    pub fn remaining(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn draw(&self, requested: u64) -> Result<()> {
        self.0
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |left| left.checked_sub(requested))
            .map(|_| ())
            .map_err(|left| Error::BudgetExceeded { requested, budget: left })
    }
}

impl PartialEq for SharedBudget {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Cap on n_trials x max(N) of a single run, checked before any work starts.
    pub budget: u64,
    #[serde(skip)]
    pub shared: Option<SharedBudget>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { budget: DEFAULT_ATTEMPT_BUDGET, shared: None }
    }
}

impl SimOptions {
    pub fn with_shared(shared: SharedBudget) -> Self {
        Self { shared: Some(shared), ..Self::default() }
    }
}

/// Per-run constants of the phase kernel.
struct Engine {
    timing: ResolvedAttempt,
    noise: NoiseModel,
    det: Detunings,
    /// Compensated mean reset phase per ground-triplet state.
    reset_offset: [f64; 3],
    /// Sorted attempt counts at which the running phase is sampled.
    checkpoints: Vec<u64>,
    /// For every grid point: indices into `checkpoints` and the sign pattern.
    taps: Vec<Tap>,
}

#[derive(Debug, Clone, Copy)]
enum Tap {
    Free { end: usize },
    OneEcho { half: usize, end: usize },
    TwoEchoes { q1: usize, q3: usize, end: usize },
}

impl Tap {
    #[inline]
    fn phase(&self, s: &[f64]) -> f64 {
        match *self {
            Tap::Free { end } => s[end],
            Tap::OneEcho { half, end } => 2.0 * s[half] - s[end],
            Tap::TwoEchoes { q1, q3, end } => 2.0 * s[q1] - 2.0 * s[q3] + s[end],
        }
    }
}

impl Engine {
    fn new(spec: &RunSpec) -> Result<Self> {
        let timing = spec.seq.resolve(&spec.spin, &spec.field)?;
        let det = Detunings::new(&spec.spin, &spec.field)?;
        let reset_offset = [0.0, det.of(ElectronState::MsMinus1) * spec.noise.tau, det.of(ElectronState::MsPlus1) * spec.noise.tau];
        let mut wanted: Vec<u64> = Vec::new();
        for &n in &spec.n_attempts_grid {
            wanted.push(n);
            match spec.echo_count {
                1 => wanted.push(n.div_ceil(2)),
                2 => {
                    wanted.push(n.div_ceil(4));
                    wanted.push((3 * n).div_ceil(4));
                }
                _ => {}
            }
        }
        wanted.sort_unstable();
        wanted.dedup();
        let idx = |n: u64| wanted.binary_search(&n).expect("checkpoint registered");
        let taps = spec
            .n_attempts_grid
            .iter()
            .map(|&n| match spec.echo_count {
                0 => Tap::Free { end: idx(n) },
                1 => Tap::OneEcho { half: idx(n.div_ceil(2)), end: idx(n) },
                _ => Tap::TwoEchoes { q1: idx(n.div_ceil(4)), q3: idx((3 * n).div_ceil(4)), end: idx(n) },
            })
            .collect();
        Ok(Self { timing, noise: spec.noise, det, reset_offset, checkpoints: wanted, taps })
    }

    /// Runs one trial, writing the running phase at every checkpoint into `out`.
    /// `per_attempt` receives each attempt's phase when given.
    fn trial(&self, rng: &mut TrialRng, out: &mut [f64], mut per_attempt: Option<&mut Vec<f64>>) {
        let ctx = RunContext::draw(&self.noise, rng);
        let prepared = PreparedAttempt::new(&self.timing, &self.noise, &ctx);
        let drift = ctx.detuning_offset * self.timing.duration;
        let mut state = ElectronState::Ms0;
        let mut total = 0.0;
        let mut done = 0u64;
        for (slot, &target) in out.iter_mut().zip(&self.checkpoints) {
            while done < target {
                let mut sink = PhaseSink { detunings: &self.det, phase: 0.0 };
                let flags = prepared.run(state, rng, &mut sink);
                let mut phase = sink.phase + drift;
                if let Some(r) = flags.reset {
                    phase -= self.reset_offset[crate::physics::triplet_index(r.from)];
                }
                if let Some(v) = per_attempt.as_deref_mut() {
                    v.push(phase);
                }
                total += phase;
                state = flags.exit;
                done += 1;
            }
            *slot = total;
        }
    }
}

/// Per-grid-point sums: cos, sin, cos^2, sin^2, cos*sin.
type Moments = [f64; 5];

fn accumulate_block(spec: &RunSpec, engine: Option<&Engine>, block: u64, buf: &mut Vec<f64>) -> Vec<Moments> {
    let mut acc = vec![[0.0; 5]; spec.n_attempts_grid.len()];
    let start = block * BLOCK;
    let end = (start + BLOCK).min(spec.n_trials);
    for trial in start..end {
        let mut rng = trial_stream(spec.master_seed, trial);
        match engine {
            Some(e) => {
                buf.resize(e.checkpoints.len(), 0.0);
                e.trial(&mut rng, buf, None);
                for (m, tap) in acc.iter_mut().zip(&e.taps) {
                    let (s, c) = tap.phase(buf).sin_cos();
                    m[0] += c;
                    m[1] += s;
                    m[2] += c * c;
                    m[3] += s * s;
                    m[4] += c * s;
                }
            }
            None => {
                // eigenstate: survival of sigma_z under the depolarizing channel
                let p = spec.noise.p_depol_per_attempt;
                let survived = if p <= 0.0 {
                    u64::MAX
                } else if p >= 1.0 {
                    0
                } else {
                    Geometric::new(p).expect("valid probability").sample(&mut rng)
                };
                for (m, &n) in acc.iter_mut().zip(&spec.n_attempts_grid) {
                    let z = if survived >= n { 1.0 } else { 0.0 };
                    m[0] += z;
                    m[2] += z * z;
                }
            }
        }
    }
    acc
}

fn point_from_moments(m: &Moments, n: f64) -> (f64, f64, f64, f64) {
    let (mx, my) = (m[0] / n, m[1] / n);
    let (vx, vy, cxy) = if n > 1.0 {
        (
            ((m[2] - n * mx * mx) / (n - 1.0)).max(0.0),
            ((m[3] - n * my * my) / (n - 1.0)).max(0.0),
            (m[4] - n * mx * my) / (n - 1.0),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let r = mx.hypot(my);
    let var = if r > 0.0 { (mx * mx * vx + my * my * vy + 2.0 * mx * my * cxy) / (r * r) } else { 0.5 * (vx + vy) };
    (r, (var.max(0.0) / n).sqrt(), mx, my)
}

/// Runs the ensemble and returns one coherence point per grid entry.
pub fn simulate_curve(spec: &RunSpec) -> Result<CoherenceCurve> {
    simulate_curve_with(spec, &SimOptions::default())
}

pub fn simulate_curve_with(spec: &RunSpec, opts: &SimOptions) -> Result<CoherenceCurve> {
    spec.validate()?;
    let requested = spec.attempt_cost();
    if requested > opts.budget {
        return Err(Error::BudgetExceeded { requested, budget: opts.budget });
    }
    if let Some(shared) = &opts.shared {
        shared.draw(requested)?;
    }
    let superposition = spec.initial_nuclear_state == InitialNuclearState::SuperpositionX;
    let engine = if superposition { Some(Engine::new(spec)?) } else { None };
    let blocks = spec.n_trials.div_ceil(BLOCK);
    let partial: Vec<Vec<Moments>> = (0..blocks)
        .into_par_iter()
        .map_init(Vec::new, |buf, b| accumulate_block(spec, engine.as_ref(), b, buf))
        .collect();
    let mut total = vec![[0.0; 5]; spec.n_attempts_grid.len()];
    for block in &partial {
        for (t, m) in total.iter_mut().zip(block) {
            for k in 0..5 {
                t[k] += m[k];
            }
        }
    }

    let n = spec.n_trials as f64;
    let duration = engine.as_ref().map_or(0.0, |e| e.timing.duration);
    let t2 = if spec.echo_count > 0 { spec.spin.t2_hahn } else { spec.spin.t2_star };
    let points = spec
        .n_attempts_grid
        .iter()
        .zip(&total)
        .map(|(&na, m)| {
            let (r, se, mx, my) = point_from_moments(m, n);
            let mut f = 1.0;
            if superposition {
                if spec.intrinsic_envelope {
                    f *= (-(na as f64 * duration / t2).powi(2)).exp();
                }
                f *= (1.0 - spec.noise.p_depol_per_attempt).powf(na as f64);
            }
            CoherencePoint { n: na, coherence: (r * f).clamp(0.0, 1.0), std_err: se * f, sigma_x: mx * f, sigma_y: my * f }
        })
        .collect();
    Ok(CoherenceCurve { points, digest: spec.digest(), master_seed: spec.master_seed, n_trials: spec.n_trials })
}

/// Per-attempt phases of one trial of `spec`, in order.
pub fn trial_phases(spec: &RunSpec, trial: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let single = RunSpec { n_attempts_grid: vec![spec.max_attempts()], echo_count: 0, ..spec.clone() };
    let engine = Engine::new(&single)?;
    let mut rng = trial_stream(spec.master_seed, trial);
    let mut out = vec![0.0; engine.checkpoints.len()];
    let mut phases = Vec::with_capacity(spec.max_attempts() as usize);
    engine.trial(&mut rng, &mut out, Some(&mut phases));
    Ok(phases)
}

/// Pilot-run settings for choosing an attempt grid around the 1/e decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveGrid {
    pub pilot_trials: u64,
    pub points: usize,
    /// The grid extends to `span` times the pilot's 1/e crossing.
    pub span: f64,
    /// Largest N the pilot explores before declaring no decay.
    pub max_attempts: u64,
}

impl Default for AdaptiveGrid {
    fn default() -> Self {
        Self { pilot_trials: 256, points: 24, span: 3.0, max_attempts: 1 << 22 }
    }
}

/// Pilot estimate of the 1/e crossing (attempts); `None` if the pilot never decays.
pub fn pilot_crossing(template: &RunSpec, cfg: &AdaptiveGrid, opts: &SimOptions) -> Result<Option<f64>> {
    check(cfg.pilot_trials >= 1, "pilot_trials", || "must be at least 1".into())?;
    let mut top = 1024u64.min(cfg.max_attempts.max(1));
    loop {
        let grid: Vec<u64> = std::iter::once(0).chain((0..).map(|k| 1u64 << k).take_while(|&n| n <= top)).collect();
        let pilot = RunSpec {
            n_attempts_grid: grid,
            n_trials: cfg.pilot_trials,
            master_seed: derive_seed(template.master_seed, 0x5049_4c4f_54),
            ..template.clone()
        };
        let curve = simulate_curve_with(&pilot, opts)?;
        let a = curve.points[0].coherence.max(f64::MIN_POSITIVE);
        let target = a / std::f64::consts::E;
        if let Some(i) = curve.points.iter().position(|p| p.coherence < target) {
            let (lo, hi) = (&curve.points[i - 1], &curve.points[i]);
            if lo.n == 0 {
                return Ok(Some(hi.n as f64));
            }
            // interpolate ln C linearly in N
            let (l0, l1) = (lo.coherence.max(1e-12).ln(), hi.coherence.max(1e-12).ln());
            let f = ((l0 - target.ln()) / (l0 - l1)).clamp(0.0, 1.0);
            return Ok(Some(lo.n as f64 + f * (hi.n - lo.n) as f64));
        }
        if top >= cfg.max_attempts {
            return Ok(None);
        }
        top = (top * 8).min(cfg.max_attempts);
    }
}

/// Evenly spaced grid up to `span` x the pilot crossing (or `max_attempts`).
pub fn adaptive_grid(template: &RunSpec, cfg: &AdaptiveGrid, opts: &SimOptions) -> Result<Vec<u64>> {
    check(cfg.points >= 4, "points", || "need at least 4 grid points".into())?;
    check(cfg.span > 0.0, "span", || "must be positive".into())?;
    let top = match pilot_crossing(template, cfg, opts)? {
        Some(n) => (cfg.span * n).ceil().max(cfg.points as f64) as u64,
        None => cfg.max_attempts.max(cfg.points as u64),
    };
    let mut grid: Vec<u64> = (1..=cfg.points).map(|i| (top as f64 * i as f64 / cfg.points as f64).round() as u64).collect();
    grid.dedup();
    Ok(grid)
}

/// How repump power maps to the mean reset time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepumpPowerLaw {
    /// tau = tau_min (P + P_sat) / P
    Linear,
    /// tau = tau_min sqrt((P + P_sat) / P); the decay constant then follows
    /// N_sat P / (P + P_sat) exactly in the weak-dephasing limit.
    #[default]
    SquareRoot,
}

pub fn power_to_tau(power: f64, tau_min: f64, p_sat: f64, law: RepumpPowerLaw) -> f64 {
    let ratio = (power + p_sat) / power;
    match law {
        RepumpPowerLaw::Linear => tau_min * ratio,
        RepumpPowerLaw::SquareRoot => tau_min * ratio.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum SweepAxis {
    /// Value is the repump power (W).
    RepumpPower { tau_min: f64, p_sat: f64, #[serde(default)] law: RepumpPowerLaw },
    PMw,
    PInit,
    /// Value is the magnetic field (G); the Larmor frequency follows the 13C gyromagnetic ratio.
    FieldGauss,
    /// Value multiplies the template's Larmor frequency.
    FieldScale,
    /// Value is the mean reset time (s).
    Tau,
    /// Value is the coupling strength (rad/s); replaces the coupling by a direct one.
    DeltaOmega,
}

impl SweepAxis {
    pub fn apply(&self, template: &RunSpec, value: f64) -> Result<RunSpec> {
        let mut spec = template.clone();
        match *self {
            SweepAxis::RepumpPower { tau_min, p_sat, law } => {
                check(value > 0.0, "power", || format!("must be positive, got {value}"))?;
                spec.noise.tau = power_to_tau(value, tau_min, p_sat, law);
            }
            SweepAxis::PMw => spec.noise.p_mw = value,
            SweepAxis::PInit => spec.noise.p_init = value,
            SweepAxis::FieldGauss => spec.field = FieldParams::from_field(value, C13_GYROMAGNETIC_HZ_PER_GAUSS)?,
            SweepAxis::FieldScale => spec.field = template.field.scaled(value)?,
            SweepAxis::Tau => spec.noise.tau = value,
            SweepAxis::DeltaOmega => {
                spec.spin.coupling = Coupling::Direct { delta_omega: value };
                spec.spin.delta_omega_approximation = true;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GridRule {
    /// Use the template's grid for every point.
    Fixed,
    Adaptive(AdaptiveGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub grid: GridRule,
    pub fit: FitOptions,
    pub fix_m: Option<f64>,
    pub sim: SimOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { grid: GridRule::Adaptive(AdaptiveGrid::default()), fit: FitOptions::default(), fix_m: None, sim: SimOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub curve: CoherenceCurve,
    pub fit: Option<FitResult>,
    /// Why the fit is missing.
    pub fit_error: Option<String>,
}

impl SweepPoint {
    /// Fitted decay constant; NaN when the fit failed.
    pub fn n_1e(&self) -> f64 {
        self.fit.as_ref().map_or(f64::NAN, |f| f.value("n_1e"))
    }

    pub fn n_1e_err(&self) -> f64 {
        self.fit.as_ref().map_or(f64::NAN, |f| f.std_err("n_1e"))
    }

    pub fn m(&self) -> f64 {
        self.fit.as_ref().map_or(f64::NAN, |f| f.value("m"))
    }
}

/// Simulates and fits every value along `axis`. All points share the
/// template's master seed (common random numbers). Fit failures are recorded
/// per point; simulation errors abort the sweep.
pub fn sweep(template: &RunSpec, axis: &SweepAxis, values: &[f64], opts: &SweepOptions) -> Result<Vec<SweepPoint>> {
    check(!values.is_empty(), "values", || "sweep needs at least one value".into())?;
    values
        .iter()
        .map(|&value| {
            let mut spec = axis.apply(template, value)?;
            if let GridRule::Adaptive(cfg) = &opts.grid {
                spec.n_attempts_grid = adaptive_grid(&spec, cfg, &opts.sim)?;
            }
            let curve = simulate_curve_with(&spec, &opts.sim)?;
            let (fit, fit_error) = match fit_stretched_exp(&curve.observations(), opts.fix_m, &opts.fit) {
                Ok(f) if f.converged => (Some(f), None),
                Ok(f) => (Some(f), Some("fit did not converge".into())),
                Err(e) => (None, Some(e.to_string())),
            };
            Ok(SweepPoint { value, curve, fit, fit_error })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::BlokParams;
    use crate::attempt::{realize_attempt, Delay};
    use crate::physics::angular;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn c1() -> NuclearSpinParams {
        NuclearSpinParams::direct("C1", angular(376.5e3), 9.9e-3).unwrap()
    }

    fn c2() -> NuclearSpinParams {
        NuclearSpinParams::direct("C2", angular(62.4e3), 9.9e-3).unwrap()
    }

    fn spec(spin: NuclearSpinParams, noise: NoiseModel, grid: Vec<u64>, trials: u64) -> RunSpec {
        RunSpec {
            spin,
            field: FieldParams::reference_414g(),
            seq: AttemptSequence::standard(Delay::LarmorPeriods { count: 1 }),
            noise,
            n_attempts_grid: grid,
            n_trials: trials,
            echo_count: 0,
            master_seed: 17,
            initial_nuclear_state: InitialNuclearState::SuperpositionX,
            intrinsic_envelope: false,
        }
    }

    #[test]
    fn noiseless_runs_keep_full_coherence() {
        let s = spec(c2(), NoiseModel::noiseless(), vec![1, 10, 1000], 50);
        let curve = simulate_curve(&s).unwrap();
        for p in &curve.points {
            assert!((p.coherence - 1.0).abs() < 1e-12, "{p:?}");
            assert!(p.std_err < 1e-6);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = spec(c2(), NoiseModel::noiseless(), vec![1, 2], 10);
        assert!(simulate_curve(&RunSpec { n_trials: 0, ..base.clone() }).is_err());
        assert!(simulate_curve(&RunSpec { n_attempts_grid: vec![], ..base.clone() }).is_err());
        assert!(simulate_curve(&RunSpec { n_attempts_grid: vec![3, 3], ..base.clone() }).is_err());
        assert!(simulate_curve(&RunSpec { echo_count: 3, ..base.clone() }).is_err());
        let big = RunSpec { n_attempts_grid: vec![1_000_000], n_trials: 1000, ..base };
        assert_eq!(
            simulate_curve_with(&big, &SimOptions { budget: 1_000, shared: None }),
            Err(Error::BudgetExceeded { requested: 1_000_000_000, budget: 1_000 })
        );
    }

    #[test]
    fn fast_kernel_matches_explicit_trajectories() {
        let noise = NoiseModel { p_mw: 0.1, p_init: 0.05, tau: 0.3e-6, ..NoiseModel::noiseless() };
        let s = RunSpec { seq: AttemptSequence::standard(Delay::Seconds { value: 1.3e-6 }), ..spec(c2(), noise, vec![200], 1) };
        for trial in 0..5 {
            let fast = trial_phases(&s, trial).unwrap();
            let timing = s.seq.resolve(&s.spin, &s.field).unwrap();
            let mut rng = trial_stream(s.master_seed, trial);
            let ctx = RunContext::draw(&noise, &mut rng);
            let mut state = ElectronState::Ms0;
            for &phase in &fast {
                let out = realize_attempt(&timing, &noise, state, &mut rng, &ctx).unwrap();
                let slow = out.nuclear_phase(&s.spin, &s.field, noise.tau).unwrap();
                assert!((slow - phase).abs() < 1e-9, "{slow} vs {phase}");
                state = out.exit_state();
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let noise = NoiseModel { tau: 0.2e-6, p_mw: 0.02, sigma_tau_qs: 20e-9, ..NoiseModel::noiseless() };
        let s = spec(c2(), noise, vec![10, 100, 400], 300);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| simulate_curve(&s)).unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| simulate_curve(&s)).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.digest, s.digest());
    }

    #[test]
    fn pure_repump_matches_closed_form() {
        let tau = 52e-9;
        let s = spec(c1(), NoiseModel::pure_repump(tau), vec![50, 150, 300, 500, 800], 4000);
        let curve = simulate_curve(&s).unwrap();
        for p in &curve.points {
            let expect = crate::analytic::blok_coherence(&BlokParams { tau, delta_omega: angular(376.5e3), p1: 0.5, n: p.n as f64 });
            assert!((p.coherence - expect).abs() < 3.5 * p.std_err.max(1e-3), "{p:?} vs {expect}");
        }
    }

    #[test]
    fn echo_is_harmless_for_pure_repump_noise() {
        let s = spec(c1(), NoiseModel::pure_repump(52e-9), vec![100, 263], 2000);
        let free = simulate_curve(&s).unwrap();
        let echoed = simulate_curve(&RunSpec { echo_count: 1, ..s.clone() }).unwrap();
        for (a, b) in free.points.iter().zip(&echoed.points) {
            assert!((a.coherence - b.coherence).abs() < 4.0 * (a.std_err + b.std_err));
        }
    }

    #[test]
    fn echo_refocuses_quasi_static_detuning() {
        let noise = NoiseModel { sigma_detuning_qs: NoiseModel::detuning_width_for_t2_star(9.9e-3), ..NoiseModel::noiseless() };
        let s = spec(c2(), noise, vec![200, 800, 1600], 1000);
        let free = simulate_curve(&s).unwrap();
        for echoes in [1, 2] {
            let echoed = simulate_curve(&RunSpec { echo_count: echoes, ..s.clone() }).unwrap();
            for (a, b) in free.points.iter().zip(&echoed.points) {
                assert!(b.coherence + 3.0 * (a.std_err + b.std_err) >= a.coherence);
                assert!(b.coherence > 0.99);
            }
        }
        // the no-echo decay reproduces the T2* envelope
        let d = s.seq.resolve(&s.spin, &s.field).unwrap().duration;
        for p in &free.points {
            let env = (-(p.n as f64 * d / 9.9e-3).powi(2)).exp();
            assert!((p.coherence - env).abs() < 3.0 * p.std_err + 0.03, "{p:?} vs {env}");
        }
    }

    #[test]
    fn intrinsic_envelope_and_depolarization_multiply() {
        let noise = NoiseModel { p_depol_per_attempt: 1e-4, ..NoiseModel::noiseless() };
        let s = RunSpec { intrinsic_envelope: true, ..spec(c2(), noise, vec![100, 1000], 10) };
        let curve = simulate_curve(&s).unwrap();
        let d = s.seq.resolve(&s.spin, &s.field).unwrap().duration;
        for p in &curve.points {
            let n = p.n as f64;
            let expect = (-(n * d / 9.9e-3).powi(2)).exp() * (1.0 - 1e-4f64).powf(n);
            assert!((p.coherence - expect).abs() < 1e-12);
        }
        let echoed = simulate_curve(&RunSpec { echo_count: 1, ..s }).unwrap();
        assert!(echoed.points[1].coherence > curve.points[1].coherence);
    }

    #[test]
    fn eigenstate_survival_follows_depolarization() {
        let noise = NoiseModel { p_depol_per_attempt: 1.0 / 3500.0, tau: 1e-6, ..NoiseModel::noiseless() };
        let s = RunSpec {
            initial_nuclear_state: InitialNuclearState::EigenstateUp,
            ..spec(c2(), noise, vec![0, 1000, 3500, 7000], 4000)
        };
        let curve = simulate_curve(&s).unwrap();
        assert_eq!(curve.points[0].coherence, 1.0);
        for p in &curve.points[1..] {
            let expect = (1.0 - 1.0 / 3500.0f64).powf(p.n as f64);
            assert!((p.coherence - expect).abs() < 3.5 * p.std_err, "{p:?} vs {expect}");
        }
    }

    #[test]
    fn power_law_examples() {
        assert!((power_to_tau(1e9, 50e-9, 366e-9, RepumpPowerLaw::Linear) - 50e-9).abs() < 1e-15);
        assert!((power_to_tau(366e-9, 50e-9, 366e-9, RepumpPowerLaw::Linear) - 100e-9).abs() < 1e-18);
        assert!((power_to_tau(366e-9, 50e-9, 366e-9, RepumpPowerLaw::SquareRoot) - 50e-9 * 2f64.sqrt()).abs() < 1e-18);
        assert!((power_to_tau(1e9, 50e-9, 366e-9, RepumpPowerLaw::SquareRoot) - 50e-9).abs() < 1e-15);
    }

    #[test]
    fn noiseless_sweep_reports_unbounded_constant() {
        let s = spec(c2(), NoiseModel::noiseless(), vec![10, 100, 1000, 10000], 20);
        let opts = SweepOptions { grid: GridRule::Fixed, ..SweepOptions::default() };
        let pts = sweep(&s, &SweepAxis::PMw, &[0.0], &opts).unwrap();
        assert!(pts[0].n_1e().is_infinite());
        assert!(pts[0].fit.as_ref().unwrap().unbounded);
    }

    #[test]
    fn adaptive_grid_brackets_the_decay() {
        let s = spec(c1(), NoiseModel::pure_repump(52e-9), vec![1], 1);
        let grid = adaptive_grid(&s, &AdaptiveGrid::default(), &SimOptions::default()).unwrap();
        let top = *grid.last().unwrap() as f64;
        assert!((600.0..1000.0).contains(&top), "{grid:?}");
        let flat = spec(c2(), NoiseModel::noiseless(), vec![1], 1);
        let cfg = AdaptiveGrid { max_attempts: 4096, pilot_trials: 4, ..AdaptiveGrid::default() };
        assert_eq!(pilot_crossing(&flat, &cfg, &SimOptions::default()).unwrap(), None);
    }

    #[test]
    fn tau_sweep_follows_quadratic_law() {
        let s = spec(c1(), NoiseModel::pure_repump(52e-9), vec![1], 2000);
        let pts = sweep(&s, &SweepAxis::Tau, &[52e-9, 104e-9], &SweepOptions::default()).unwrap();
        let ratio = pts[0].n_1e() / pts[1].n_1e();
        let expect = BlokParams { tau: 52e-9, delta_omega: angular(376.5e3), p1: 0.5, n: 1.0 }.n_1e()
            / BlokParams { tau: 104e-9, delta_omega: angular(376.5e3), p1: 0.5, n: 1.0 }.n_1e();
        assert!((ratio - expect).abs() < 0.1 * expect, "{ratio} vs {expect}");
        assert!((3.6..4.4).contains(&ratio));
    }

    #[test]
    fn alpha_pi_halves_the_decay_constant() {
        let base = RunSpec {
            seq: AttemptSequence::shortened(FRAC_PI_2, Delay::PhaseMatched { count: 1 }),
            ..spec(c2(), NoiseModel::pure_repump(130e-9), vec![1], 2000)
        };
        let half = sweep(&base, &SweepAxis::Tau, &[130e-9], &SweepOptions::default()).unwrap();
        let pi = RunSpec { seq: AttemptSequence::shortened(PI, Delay::PhaseMatched { count: 1 }), ..base };
        let full = sweep(&pi, &SweepAxis::Tau, &[130e-9], &SweepOptions::default()).unwrap();
        let ratio = full[0].n_1e() / half[0].n_1e();
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use crate::attempt::Delay;
    use crate::physics::angular;
    use proptest::prelude::*;

    fn base(noise: NoiseModel, seed: u64) -> RunSpec {
        RunSpec {
            spin: NuclearSpinParams::direct("C3", angular(77.0e3), 9.5e-3).unwrap(),
            field: FieldParams::reference_414g(),
            seq: AttemptSequence::standard(Delay::LarmorPeriods { count: 1 }),
            noise,
            n_attempts_grid: vec![50, 200, 600],
            n_trials: 400,
            echo_count: 0,
            master_seed: seed,
            initial_nuclear_state: InitialNuclearState::SuperpositionX,
            intrinsic_envelope: false,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn same_seed_same_curve(seed in any::<u64>(), p in 0.0f64..0.05) {
            let s = base(NoiseModel { p_mw: p, tau: 0.1e-6, ..NoiseModel::noiseless() }, seed);
            prop_assert_eq!(simulate_curve(&s).unwrap(), simulate_curve(&s).unwrap());
        }

        #[test]
        fn coherence_within_unit_interval(seed in any::<u64>(), p_mw in 0.0f64..0.3, p_init in 0.0f64..0.3, tau in 0.0f64..1e-6) {
            let s = base(NoiseModel { p_mw, p_init, tau, ..NoiseModel::noiseless() }, seed);
            for p in simulate_curve(&s).unwrap().points {
                prop_assert!((0.0..=1.0).contains(&p.coherence));
                prop_assert!(p.std_err.is_finite() && p.std_err >= 0.0);
            }
        }
    }

    /// Coherence at the same seed never rises (beyond 3 sigma) as one noise knob grows.
    fn check_monotone(make: impl Fn(f64) -> NoiseModel, values: [f64; 3]) {
        let curves: Vec<CoherenceCurve> = values.iter().map(|&v| simulate_curve(&base(make(v), 5)).unwrap()).collect();
        for w in curves.windows(2) {
            for (a, b) in w[0].points.iter().zip(&w[1].points) {
                assert!(b.coherence <= a.coherence + 3.0 * (a.std_err + b.std_err), "{a:?} -> {b:?}");
            }
        }
    }

    #[test]
    fn monotone_in_p_mw() {
        check_monotone(|v| NoiseModel { p_mw: v, tau: 0.1e-6, ..NoiseModel::noiseless() }, [0.0, 0.01, 0.05]);
    }

    #[test]
    fn monotone_in_p_init() {
        check_monotone(|v| NoiseModel { p_init: v, tau: 0.1e-6, ..NoiseModel::noiseless() }, [0.0, 0.01, 0.05]);
    }

    #[test]
    fn monotone_in_tau() {
        check_monotone(|v| NoiseModel { tau: v, ..NoiseModel::noiseless() }, [50e-9, 150e-9, 400e-9]);
    }

    #[test]
    fn monotone_in_quasi_static_widths() {
        check_monotone(|v| NoiseModel { tau: 0.1e-6, sigma_tau_qs: v, ..NoiseModel::noiseless() }, [0.0, 20e-9, 60e-9]);
        check_monotone(|v| NoiseModel { sigma_detuning_qs: v, ..NoiseModel::noiseless() }, [0.0, 50.0, 200.0]);
    }
}
