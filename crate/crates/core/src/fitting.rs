//! Levenberg-Marquardt fits for the three model forms used throughout:
//! stretched exponential, saturation curve and exponential rise/decay.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check, Error, Result};
use crate::rng::trial_stream;

/// One data point; `sigma` is its 1-sigma uncertainty if known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl Observation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, sigma: None }
    }

    pub fn with_sigma(x: f64, y: f64, sigma: f64) -> Self {
        Self { x, y, sigma: Some(sigma) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    StretchedExp,
    Saturation,
    ExponentialRise,
    ExponentialDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Rise,
    Decay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    #[serde(with = "crate::serde_float")]
    pub value: f64,
    #[serde(with = "crate::serde_float")]
    pub std_err: f64,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub parameters: Vec<FitParameter>,
    /// L2 norm of the unweighted residuals.
    pub residual_norm: f64,
    pub max_residual: f64,
    pub chi_squared: f64,
    pub dof: usize,
    pub converged: bool,
    pub iterations: usize,
    /// False when a parameter is not constrained by the data (amplitude
    /// compatible with zero, or a singular covariance).
    pub identifiable: bool,
    /// The data show no decay; the decay constant is reported as +inf.
    pub unbounded: bool,
}

impl FitResult {
    pub fn parameter(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Value of `name`, NaN if absent.
    pub fn value(&self, name: &str) -> f64 {
        self.parameter(name).map_or(f64::NAN, |p| p.value)
    }

    pub fn std_err(&self, name: &str) -> f64 {
        self.parameter(name).map_or(f64::NAN, |p| p.std_err)
    }

    /// Parameters are trustworthy only for a converged, identifiable fit.
    pub fn reliable(&self) -> bool {
        self.converged && self.identifiable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Weight by 1/sigma^2; otherwise every point counts equally and the
    /// covariance is scaled by the reduced chi-square.
    pub weighted: bool,
    /// Relative floor on sigma (times the largest |y|) to keep weights finite.
    pub sigma_floor: f64,
    pub max_iterations: usize,
    /// Replace covariance uncertainties by case-resampling bootstrap.
    pub bootstrap: Option<BootstrapOptions>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { weighted: true, sigma_floor: 1e-4, max_iterations: 1000, bootstrap: None }
    }
}

impl FitOptions {
    pub fn unweighted() -> Self {
        Self { weighted: false, ..Self::default() }
    }
}

trait Model {
    const NAMES: &'static [&'static str];
    fn eval(&self, p: &[f64], x: f64) -> f64;
    fn grad(&self, p: &[f64], x: f64, out: &mut [f64]);
    fn valid(&self, p: &[f64]) -> bool;
}

/// A exp[-(x/n)^m]; `fixed_m` removes m from the free parameters.
struct Stretched {
    fixed_m: Option<f64>,
}

impl Stretched {
    fn unpack(&self, p: &[f64]) -> (f64, f64, f64) {
        (p[0], p[1], self.fixed_m.unwrap_or_else(|| p[2]))
    }
}

impl Model for Stretched {
    const NAMES: &'static [&'static str] = &["amplitude", "n_1e", "m"];

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        let (a, n, m) = self.unpack(p);
        a * (-(x / n).powf(m)).exp()
    }

    fn grad(&self, p: &[f64], x: f64, out: &mut [f64]) {
        let (a, n, m) = self.unpack(p);
        let u = (x / n).powf(m);
        let e = (-u).exp();
        out[0] = e;
        out[1] = a * e * u * m / n;
        if self.fixed_m.is_none() {
            out[2] = if x > 0.0 { -a * e * u * (x / n).ln() } else { 0.0 };
        }
    }

    fn valid(&self, p: &[f64]) -> bool {
        p[1] > 0.0 && (self.fixed_m.is_some() || (p[2] > 0.05 && p[2] < 20.0))
    }
}

/// n_sat P / (P + p_sat)
struct Saturation;

impl Model for Saturation {
    const NAMES: &'static [&'static str] = &["n_sat", "p_sat"];

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        p[0] * x / (x + p[1])
    }

    fn grad(&self, p: &[f64], x: f64, out: &mut [f64]) {
        let d = x + p[1];
        out[0] = x / d;
        out[1] = -p[0] * x / (d * d);
    }

    fn valid(&self, p: &[f64]) -> bool {
        p[1] > 0.0
    }
}

/// A (1 - e^{-x/T}) + c or A e^{-x/T} + c
struct Exponential {
    direction: Direction,
}

impl Model for Exponential {
    const NAMES: &'static [&'static str] = &["amplitude", "timescale", "offset"];

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        let e = (-x / p[1]).exp();
        match self.direction {
            Direction::Rise => p[0] * (1.0 - e) + p[2],
            Direction::Decay => p[0] * e + p[2],
        }
    }

    fn grad(&self, p: &[f64], x: f64, out: &mut [f64]) {
        let e = (-x / p[1]).exp();
        let dt = p[0] * e * x / (p[1] * p[1]);
        match self.direction {
            Direction::Rise => {
                out[0] = 1.0 - e;
                out[1] = -dt;
            }
            Direction::Decay => {
                out[0] = e;
                out[1] = dt;
            }
        }
        out[2] = 1.0;
    }

    fn valid(&self, p: &[f64]) -> bool {
        p[1] > 0.0
    }
}

struct Problem<'a> {
    x: Vec<f64>,
    y: Vec<f64>,
    /// sqrt of the weights
    sw: Vec<f64>,
    weighted: bool,
    opts: &'a FitOptions,
}

impl<'a> Problem<'a> {
    fn new(obs: &[Observation], opts: &'a FitOptions, min_points: usize) -> Result<Self> {
        check(obs.len() >= min_points, "points", || {
            format!("need at least {min_points} points, got {}", obs.len())
        })?;
        check(obs.iter().all(|o| o.x.is_finite() && o.y.is_finite()), "points", || "must be finite".into())?;
        let mut sorted = obs.to_vec();
        sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        let scale = sorted.iter().fold(0.0f64, |m, o| m.max(o.y.abs())).max(f64::MIN_POSITIVE);
        let floor = opts.sigma_floor * scale;
        let weighted = opts.weighted && sorted.iter().all(|o| o.sigma.is_some());
        let sw = sorted
            .iter()
            .map(|o| if weighted { 1.0 / o.sigma.unwrap().abs().max(floor) } else { 1.0 })
            .collect();
        Ok(Self { x: sorted.iter().map(|o| o.x).collect(), y: sorted.iter().map(|o| o.y).collect(), sw, weighted, opts })
    }

    fn chi2<M: Model>(&self, m: &M, p: &[f64]) -> f64 {
        self.x.iter().zip(&self.y).zip(&self.sw).map(|((&x, &y), &w)| (w * (y - m.eval(p, x))).powi(2)).sum()
    }

    /// Returns (J^T J, J^T r) of the weighted problem.
    fn normal_equations<M: Model>(&self, m: &M, p: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let k = p.len();
        let mut jtj = DMatrix::zeros(k, k);
        let mut jtr = DVector::zeros(k);
        let mut g = vec![0.0; 3];
        for ((&x, &y), &w) in self.x.iter().zip(&self.y).zip(&self.sw) {
            m.grad(p, x, &mut g);
            let r = w * (y - m.eval(p, x));
            for i in 0..k {
                jtr[i] += w * g[i] * r;
                for j in 0..=i {
                    jtj[(i, j)] += w * w * g[i] * g[j];
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                jtj[(j, i)] = jtj[(i, j)];
            }
        }
        (jtj, jtr)
    }
}

struct LmOutcome {
    params: Vec<f64>,
    chi2: f64,
    iterations: usize,
    converged: bool,
}

fn levenberg_marquardt<M: Model>(prob: &Problem, model: &M, start: &[f64]) -> LmOutcome {
    let mut p = start.to_vec();
    let mut chi2 = prob.chi2(model, &p);
    let total: f64 = prob.y.iter().zip(&prob.sw).map(|(y, w)| (y * w).powi(2)).sum();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut it = 0;
    while it < prob.opts.max_iterations {
        it += 1;
        if chi2 <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        let (jtj, jtr) = prob.normal_equations(model, &p);
        if jtr.amax() <= 1e-15 * (chi2.sqrt() * jtj.diagonal().map(f64::sqrt).amax()).max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..p.len() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let step = match a.clone().cholesky() {
                Some(c) => c.solve(&jtr),
                None => match a.lu().solve(&jtr) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                },
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let c = if model.valid(&trial) { prob.chi2(model, &trial) } else { f64::INFINITY };
            if c.is_finite() && c <= chi2 {
                let small_step = step.iter().zip(&p).all(|(s, v)| s.abs() <= 1e-10 * (v.abs() + 1e-12));
                let small_gain = chi2 - c <= 1e-14 * chi2;
                p = trial;
                chi2 = c;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if small_step || small_gain {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step at any damping: a stationary point
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    LmOutcome { params: p, chi2, iterations: it, converged }
}

fn best_of<M: Model>(prob: &Problem, model: &M, starts: &[Vec<f64>]) -> Result<LmOutcome> {
    starts
        .iter()
        .filter(|s| model.valid(s) && s.iter().all(|v| v.is_finite()))
        .map(|s| levenberg_marquardt(prob, model, s))
        .min_by(|a, b| (!a.converged, a.chi2).partial_cmp(&(!b.converged, b.chi2)).unwrap())
        .ok_or_else(|| Error::FitFailed("no usable starting point".into()))
}

/// Assembles the result with covariance-based (or bootstrap) uncertainties.
fn finish<M: Model>(
    prob: &Problem,
    model: &M,
    kind: FitModel,
    out: &LmOutcome,
    names: &[&str],
    fixed: &[(&str, f64)],
    bootstrap: Option<Vec<f64>>,
) -> FitResult {
    let k = out.params.len();
    let n = prob.x.len();
    let dof = n.saturating_sub(k);
    let (jtj, _) = prob.normal_equations(model, &out.params);
    let scale = if prob.weighted {
        1.0
    } else if dof > 0 {
        out.chi2 / dof as f64
    } else {
        f64::NAN
    };
    let cov = jtj.try_inverse();
    let mut errs: Vec<f64> = (0..k)
        .map(|i| match &cov {
            Some(c) if c[(i, i)] >= 0.0 && c[(i, i)].is_finite() => (c[(i, i)] * scale).sqrt(),
            _ => f64::INFINITY,
        })
        .collect();
    if let Some(b) = bootstrap {
        errs = b;
    }
    let mut identifiable = errs.iter().all(|e| e.is_finite());
    let mut parameters: Vec<FitParameter> = names
        .iter()
        .zip(out.params.iter().zip(&errs))
        .map(|(name, (&v, &e))| FitParameter { name: name.to_string(), value: v, std_err: e, fixed: false })
        .collect();
    for (name, v) in fixed {
        parameters.push(FitParameter { name: name.to_string(), value: *v, std_err: 0.0, fixed: true });
    }
    let resid: Vec<f64> = prob.x.iter().zip(&prob.y).map(|(&x, &y)| y - model.eval(&out.params, x)).collect();
    let residual_norm = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
    let max_residual = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if let Some(a) = parameters.iter().find(|p| p.name == "amplitude") {
        if !(a.value.abs() > 3.0 * a.std_err) && !(residual_norm == 0.0 && a.value != 0.0) {
            identifiable = false;
        }
    }
    FitResult {
        model: kind,
        parameters,
        residual_norm,
        max_residual,
        chi_squared: out.chi2,
        dof,
        converged: out.converged,
        iterations: out.iterations,
        identifiable,
        unbounded: false,
    }
}

/// Case-resampling bootstrap; returns per-parameter standard deviations.
fn bootstrap_errors<F>(obs: &[Observation], opts: &BootstrapOptions, refit: F) -> Vec<f64>
where
    F: Fn(&[Observation]) -> Option<Vec<f64>>,
{
    let mut rng = trial_stream(opts.seed, 0);
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(opts.resamples);
    let mut draw = Vec::with_capacity(obs.len());
    for _ in 0..opts.resamples {
        draw.clear();
        draw.extend((0..obs.len()).map(|_| obs[rng.random_range(0..obs.len())]));
        if let Some(p) = refit(&draw) {
            samples.push(p);
        }
    }
    let Some(k) = samples.first().map(Vec::len) else {
        return Vec::new();
    };
    if samples.len() < 2 {
        return vec![f64::INFINITY; k];
    }
    (0..k)
        .map(|i| {
            let m = samples.iter().map(|s| s[i]).sum::<f64>() / samples.len() as f64;
            let v = samples.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
            v.sqrt()
        })
        .collect()
}

fn no_bootstrap(opts: &FitOptions) -> FitOptions {
    FitOptions { bootstrap: None, ..*opts }
}

/// Initial decay constant: linear interpolation of the 1/e crossing, or a
/// log-linear extrapolation when the data never get there.
fn crossing_guess(x: &[f64], y: &[f64], a: f64) -> f64 {
    let target = a / std::f64::consts::E;
    for i in 1..x.len() {
        if y[i] <= target && y[i - 1] > target {
            let f = (y[i - 1] - target) / (y[i - 1] - y[i]);
            return x[i - 1] + f * (x[i] - x[i - 1]);
        }
    }
    let last = x.len() - 1;
    let ratio = (y[last] / a).clamp(1e-12, 1.0 - 1e-9);
    x[last].max(f64::MIN_POSITIVE) / -ratio.ln()
}

/// Fits A exp[-(N/N_1e)^m]. A flat curve yields the unbounded sentinel
/// (N_1e = +inf); so does a fit whose decay constant runs far beyond the data.
pub fn fit_stretched_exp(obs: &[Observation], fix_m: Option<f64>, opts: &FitOptions) -> Result<FitResult> {
    let prob = Problem::new(obs, opts, 4)?;
    if let Some(m) = fix_m {
        check(m > 0.0, "fix_m", || format!("must be positive, got {m}"))?;
    }
    let model = Stretched { fixed_m: fix_m };
    let a0 = prob.y[0];
    let x_max = prob.x.last().copied().unwrap_or(0.0);
    let spread = prob.y.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - prob.y.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if spread <= 1e-12 * a0.abs().max(f64::MIN_POSITIVE) || prob.y.iter().all(|&v| v >= a0) {
        return Ok(unbounded_result(&prob, fix_m));
    }
    let n0 = crossing_guess(&prob.x, &prob.y, a0);
    let ratio = (prob.y[prob.y.len() - 1] / a0).clamp(1e-12, 1.0 - 1e-9);
    let n_loglin = x_max.max(f64::MIN_POSITIVE) / -ratio.ln();
    let starts: Vec<Vec<f64>> = match fix_m {
        Some(_) => vec![vec![a0, n0], vec![a0, 0.5 * n0], vec![a0, n_loglin]],
        None => vec![vec![a0, n0, 1.0], vec![a0, n0, 2.0], vec![a0, n_loglin, 1.0]],
    };
    let out = best_of(&prob, &model, &starts)?;
    if out.params[1] > 1e6 * x_max.max(1.0) {
        return Ok(unbounded_result(&prob, fix_m));
    }
    let boot = opts.bootstrap.map(|b| {
        bootstrap_errors(obs, &b, |d| fit_stretched_exp(d, fix_m, &no_bootstrap(opts)).ok().map(|r| {
            let mut v = vec![r.value("amplitude"), r.value("n_1e")];
            if fix_m.is_none() {
                v.push(r.value("m"));
            }
            v
        }))
    });
    let fixed: Vec<(&str, f64)> = fix_m.map(|m| vec![("m", m)]).unwrap_or_default();
    let names = if fix_m.is_some() { &Stretched::NAMES[..2] } else { Stretched::NAMES };
    Ok(finish(&prob, &model, FitModel::StretchedExp, &out, names, &fixed, boot))
}

fn unbounded_result(prob: &Problem, fix_m: Option<f64>) -> FitResult {
    let n = prob.y.len() as f64;
    let mean = prob.y.iter().sum::<f64>() / n;
    let resid: Vec<f64> = prob.y.iter().map(|y| y - mean).collect();
    let sd = if prob.y.len() > 1 { (resid.iter().map(|r| r * r).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let param = |name: &str, value: f64, std_err: f64, fixed: bool| FitParameter { name: name.into(), value, std_err, fixed };
    FitResult {
        model: FitModel::StretchedExp,
        parameters: vec![
            param("amplitude", mean, sd / n.sqrt(), false),
            param("n_1e", f64::INFINITY, f64::INFINITY, false),
            param("m", fix_m.unwrap_or(f64::NAN), if fix_m.is_some() { 0.0 } else { f64::NAN }, fix_m.is_some()),
        ],
        residual_norm: resid.iter().map(|r| r * r).sum::<f64>().sqrt(),
        max_residual: resid.iter().fold(0.0f64, |m, r| m.max(r.abs())),
        chi_squared: prob.y.iter().zip(&prob.sw).map(|(y, w)| (w * (y - mean)).powi(2)).sum(),
        dof: prob.y.len().saturating_sub(1),
        converged: true,
        iterations: 0,
        identifiable: false,
        unbounded: true,
    }
}

/// Fits N_sat P / (P + P_sat) to (power, decay constant) points.
pub fn fit_saturation(obs: &[Observation], opts: &FitOptions) -> Result<FitResult> {
    let prob = Problem::new(obs, opts, 3)?;
    check(prob.x.iter().all(|&p| p > 0.0), "power", || "all powers must be positive".into())?;
    let model = Saturation;
    let n = prob.x.len();
    let y_max = prob.y.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    // half-saturation crossing as the P_sat guess
    let half = 0.5 * y_max;
    let p_half = prob.x.iter().zip(&prob.y).find(|(_, &y)| y >= half).map_or(prob.x[n / 2], |(&x, _)| x);
    // Lineweaver-Burk: 1/N = 1/N_sat + (P_sat/N_sat)(1/P)
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in prob.x.iter().zip(&prob.y) {
        let (u, v) = (1.0 / x, 1.0 / y);
        sx += u;
        sy += v;
        sxx += u * u;
        sxy += u * v;
    }
    let nf = n as f64;
    let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
    let icpt = (sy - slope * sx) / nf;
    let mut starts = vec![vec![y_max * 1.5, p_half], vec![y_max, prob.x[0]], vec![2.0 * y_max, prob.x[n - 1]]];
    if icpt > 0.0 && slope > 0.0 {
        starts.insert(0, vec![1.0 / icpt, slope / icpt]);
    }
    let out = best_of(&prob, &model, &starts)?;
    let boot = opts.bootstrap.map(|b| {
        bootstrap_errors(obs, &b, |d| fit_saturation(d, &no_bootstrap(opts)).ok().map(|r| vec![r.value("n_sat"), r.value("p_sat")]))
    });
    Ok(finish(&prob, &model, FitModel::Saturation, &out, Saturation::NAMES, &[], boot))
}

/// Fits A(1 - e^{-t/T}) + c (rise) or A e^{-t/T} + c (decay).
pub fn fit_exponential(obs: &[Observation], direction: Direction, opts: &FitOptions) -> Result<FitResult> {
    let prob = Problem::new(obs, opts, 3)?;
    let model = Exponential { direction };
    let n = prob.x.len();
    let (y0, y1) = (prob.y[0], prob.y[n - 1]);
    let (x0, x1) = (prob.x[0], prob.x[n - 1]);
    let span = (x1 - x0).max(f64::MIN_POSITIVE);
    let kind = match direction {
        Direction::Rise => FitModel::ExponentialRise,
        Direction::Decay => FitModel::ExponentialDecay,
    };
    if prob.y.iter().all(|&v| v == y0) {
        let out = LmOutcome { params: vec![0.0, span, y0], chi2: 0.0, iterations: 0, converged: true };
        let mut r = finish(&prob, &model, kind, &out, Exponential::NAMES, &[], None);
        r.identifiable = false;
        if let Some(t) = r.parameters.iter_mut().find(|p| p.name == "timescale") {
            t.std_err = f64::INFINITY;
        }
        return Ok(r);
    }
    // timescale from the 1/e point of the total change
    let target = y1 + (y0 - y1) / std::f64::consts::E;
    let t_guess = prob
        .x
        .iter()
        .zip(&prob.y)
        .find(|(_, &y)| if y1 > y0 { y >= target } else { y <= target })
        .map_or(span / 3.0, |(&x, _)| (x - x0).max(span / 100.0));
    let starts: Vec<Vec<f64>> = [t_guess, span / 3.0, span / 10.0]
        .iter()
        .map(|&t| {
            let e = (-x0 / t).exp();
            match direction {
                Direction::Rise => {
                    let a = (y1 - y0) / e.max(1e-12);
                    vec![a, t, y1 - a]
                }
                Direction::Decay => {
                    let a = (y0 - y1) / e.max(1e-12);
                    vec![a, t, y1]
                }
            }
        })
        .collect();
    let out = best_of(&prob, &model, &starts)?;
    let boot = opts.bootstrap.map(|b| {
        bootstrap_errors(obs, &b, |d| {
            fit_exponential(d, direction, &no_bootstrap(opts))
                .ok()
                .map(|r| vec![r.value("amplitude"), r.value("timescale"), r.value("offset")])
        })
    });
    Ok(finish(&prob, &model, kind, &out, Exponential::NAMES, &[], boot))
}
