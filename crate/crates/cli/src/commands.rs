//! Scenario execution behind the subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use nvsim_core::analytic::{failure_phases, revival_curve};
use nvsim_core::fitting::{fit_exponential, fit_saturation, fit_stretched_exp, Direction, FitOptions, FitResult, Observation};
use nvsim_core::optical::{branching_estimates, pump_probe_curve, BranchingEstimate, ExcitationStats, PumpProbeConfig};
use nvsim_core::{
    adaptive_grid, binomial_coherence, blok_coherence, reference, simulate_curve_with, sweep, AttemptSequence, BlokParams,
    CoherenceCurve, Delay, FieldParams, GridRule, NuclearSpinParams, RunSpec, SharedBudget, SimOptions, SweepOptions,
};

use crate::config::{Axis, AxisName, FitForm, FitSection, GridChoice, Scenario, ScenarioConfig};
use crate::error::{CliError, CliResult, ErrorKind};
use crate::output::{num, slug, with_err, OutDir, Table};
use crate::units::{Freq, Time};

/// Settings shared by every command of one invocation.
pub struct Ctx {
    pub out_dir: PathBuf,
    pub strict: bool,
    pub budget: SharedBudget,
    /// One-line summaries, also printed as they are produced.
    pub lines: Vec<String>,
    pub quiet: bool,
}

impl Ctx {
    pub fn new(out_dir: PathBuf, strict: bool, budget: u64) -> Self {
        Self { out_dir, strict, budget: SharedBudget::new(budget), lines: Vec::new(), quiet: false }
    }

    pub fn sim(&self) -> SimOptions {
        SimOptions::with_shared(self.budget.clone())
    }

    pub fn say(&mut self, line: String) {
        if !self.quiet {
            println!("{line}");
        }
        self.lines.push(line);
    }

    fn fit_failed(&mut self, what: &str, reason: &str) -> CliResult<()> {
        if self.strict {
            return Err(CliError::new(ErrorKind::Fit, format!("{what}: fit failed: {reason}")));
        }
        if !self.quiet {
            eprintln!("warning: {what}: fit failed: {reason}");
        }
        Ok(())
    }

    pub fn out(&self, sub: Option<&str>) -> CliResult<OutDir> {
        match sub {
            Some(s) => OutDir::create(&self.out_dir.join(s)),
            None => OutDir::create(&self.out_dir),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub run_digest: String,
    pub n_trials: u64,
    pub attempts: Vec<u64>,
    pub fit: Option<FitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
    pub csv: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub schema: String,
    pub command: String,
    pub config_digest: String,
    pub master_seed: u64,
    pub scenarios: Vec<ScenarioSummary>,
}

pub fn fit_curve(obs: &[Observation], fit: &FitSection) -> Result<FitResult, String> {
    let opts = fit.options();
    let r = match fit.form {
        FitForm::Stretched => fit_stretched_exp(obs, fit.fix_m, &opts),
        FitForm::ExponentialDecay => fit_exponential(obs, Direction::Decay, &opts),
    };
    match r {
        Ok(f) if f.converged => Ok(f),
        Ok(_) => Err("did not converge".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn decay_constant(f: &FitResult) -> (f64, f64) {
    match f.parameter("n_1e") {
        Some(p) => (p.value, p.std_err),
        None => (f.value("timescale"), f.std_err("timescale")),
    }
}

pub fn fit_line(f: &FitResult) -> String {
    let (n, e) = decay_constant(f);
    let mut s = format!("N_1/e = {}", with_err(n, e));
    if let Some(m) = f.parameter("m") {
        if m.fixed {
            s += &format!(", m = {} (fixed)", m.value);
        } else if f.unbounded {
            s += ", no decay over the grid";
        } else {
            s += &format!(", m = {}", with_err(m.value, m.std_err));
        }
    }
    if let Some(a) = f.parameter("amplitude") {
        s += &format!(", A = {}", with_err(a.value, a.std_err));
    }
    s
}

pub fn curve_table(curve: &CoherenceCurve, config_digest: &str) -> Table {
    let mut t = Table::new(&["n", "coherence", "std_err", "sigma_x", "sigma_y", "seed", "config_digest"]);
    for p in &curve.points {
        t.push(vec![
            p.n.to_string(),
            num(p.coherence),
            num(p.std_err),
            num(p.sigma_x),
            num(p.sigma_y),
            curve.master_seed.to_string(),
            config_digest.to_string(),
        ]);
    }
    t
}

fn resolve_grid(spec: &mut RunSpec, grid: &GridChoice, sim: &SimOptions) -> CliResult<()> {
    spec.n_attempts_grid = match grid {
        GridChoice::Fixed(g) => g.clone(),
        GridChoice::Adaptive(cfg) => adaptive_grid(spec, cfg, sim).map_err(|e| CliError::at("run.attempts", e))?,
    };
    Ok(())
}

/// Simulates every scenario of the config and fits each curve.
pub fn simulate(ctx: &mut Ctx, cfg: &ScenarioConfig, sub: Option<&str>) -> CliResult<SimulateSummary> {
    let scenarios = cfg.scenarios()?;
    let digest = cfg.digest();
    let label = slug(&cfg.label());
    let mut out = ctx.out(sub)?;
    out.text(&format!("{label}_effective.toml"), &cfg.effective_toml())?;
    let mut summaries = Vec::new();
    for Scenario { name, mut spec, grid } in scenarios {
        let sim = ctx.sim();
        resolve_grid(&mut spec, &grid, &sim)?;
        let curve = simulate_curve_with(&spec, &sim).map_err(|e| CliError::at(&name, e))?;
        let file = if cfg.variants.is_empty() { format!("{label}.csv") } else { format!("{label}_{}.csv", slug(&name)) };
        out.csv(&file, &curve_table(&curve, &digest))?;
        let (fit, fit_error) = match fit_curve(&curve.observations(), &cfg.fit) {
            Ok(f) => (Some(f), None),
            Err(e) => {
                ctx.fit_failed(&name, &e)?;
                (None, Some(e))
            }
        };
        let line = match &fit {
            Some(f) => format!("{name}: {} [{} trials, seed {}, digest {}]", fit_line(f), spec.n_trials, cfg.seed, &digest[..12]),
            None => format!("{name}: fit failed [{} trials, seed {}, digest {}]", spec.n_trials, cfg.seed, &digest[..12]),
        };
        ctx.say(line);
        summaries.push(ScenarioSummary {
            name,
            run_digest: curve.digest.clone(),
            n_trials: spec.n_trials,
            attempts: spec.n_attempts_grid.clone(),
            fit,
            fit_error,
            csv: file,
        });
    }
    let summary = SimulateSummary {
        schema: cfg.schema.clone(),
        command: "simulate".into(),
        config_digest: digest,
        master_seed: cfg.seed,
        scenarios: summaries,
    };
    out.json(&format!("{label}_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// Axis values in the units the simulator uses (W, G, s, rad/s).
    pub coords: Vec<f64>,
    pub n_1e: f64,
    pub n_1e_err: f64,
    pub m: f64,
    pub m_err: f64,
    pub amplitude: f64,
    pub fit_error: Option<String>,
    pub run_digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepScenario {
    pub name: String,
    pub axes: Vec<String>,
    pub rows: Vec<SweepRow>,
    /// N_sat P / (P + P_sat) fitted over the repump-power axis, P in nW.
    pub saturation: Option<FitResult>,
    pub csv: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub schema: String,
    pub command: String,
    pub config_digest: String,
    pub master_seed: u64,
    pub scenarios: Vec<SweepScenario>,
}

fn cartesian(axes: &[Axis]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, a| {
        acc.iter().flat_map(|prefix| a.values.iter().map(move |&v| [prefix.as_slice(), &[v]].concat())).collect()
    })
}

/// Runs the cartesian product of the sweep axes for every scenario.
pub fn run_sweep(ctx: &mut Ctx, cfg: &ScenarioConfig, sub: Option<&str>) -> CliResult<SweepSummary> {
    let axes = cfg.sweep_axes()?;
    let scenarios = cfg.scenarios()?;
    let digest = cfg.digest();
    let label = slug(&cfg.label());
    let saturation_wanted = cfg.sweep.as_ref().is_some_and(|s| s.saturation_fit);
    if saturation_wanted && !(axes.len() == 1 && axes[0].name == AxisName::RepumpPower) {
        return Err(CliError::schema("sweep.saturation_fit: needs exactly one repump_power axis"));
    }
    let mut out = ctx.out(sub)?;
    out.text(&format!("{label}_effective.toml"), &cfg.effective_toml())?;
    let (outer, last) = axes.split_at(axes.len() - 1);
    let last = &last[0];
    let mut result = Vec::new();
    for Scenario { name, spec, grid } in scenarios {
        let mut rows = Vec::new();
        for prefix in cartesian(outer) {
            let mut template = spec.clone();
            for (a, &v) in outer.iter().zip(&prefix) {
                template = a.core.apply(&template, v).map_err(|e| CliError::at(&format!("sweep.{}", a.name.as_str()), e))?;
            }
            let grid_rule = match &grid {
                GridChoice::Fixed(g) => {
                    template.n_attempts_grid = g.clone();
                    GridRule::Fixed
                }
                GridChoice::Adaptive(a) => GridRule::Adaptive(*a),
            };
            let opts = SweepOptions { grid: grid_rule, fit: cfg.fit.options(), fix_m: cfg.fit.fix_m, sim: ctx.sim() };
            let points = sweep(&template, &last.core, &last.values, &opts)
                .map_err(|e| CliError::at(&format!("{name}: sweep.{}", last.name.as_str()), e))?;
            for p in points {
                let coords = [prefix.as_slice(), &[p.value]].concat();
                if let Some(err) = &p.fit_error {
                    ctx.fit_failed(&format!("{name} at {coords:?}"), err)?;
                }
                let f = p.fit.as_ref();
                rows.push(SweepRow {
                    coords,
                    n_1e: p.n_1e(),
                    n_1e_err: p.n_1e_err(),
                    m: p.m(),
                    m_err: f.map_or(f64::NAN, |f| f.std_err("m")),
                    amplitude: f.map_or(f64::NAN, |f| f.value("amplitude")),
                    fit_error: p.fit_error.clone(),
                    run_digest: p.curve.digest.clone(),
                });
            }
        }
        let axis_names: Vec<String> = axes.iter().map(|a| a.name.as_str().to_string()).collect();
        let mut header: Vec<&str> = axis_names.iter().map(String::as_str).collect();
        header.extend(["n_1e", "n_1e_err", "m", "m_err", "amplitude", "fit_ok", "seed", "config_digest"]);
        let mut table = Table::new(&header);
        for r in &rows {
            let mut row: Vec<String> = r.coords.iter().map(|&c| num(c)).collect();
            row.extend([
                num(r.n_1e),
                num(r.n_1e_err),
                num(r.m),
                num(r.m_err),
                num(r.amplitude),
                r.fit_error.is_none().to_string(),
                cfg.seed.to_string(),
                digest.clone(),
            ]);
            table.push(row);
        }
        let file = if cfg.variants.is_empty() { format!("{label}.csv") } else { format!("{label}_{}.csv", slug(&name)) };
        out.csv(&file, &table)?;

        let saturation = if saturation_wanted {
            let obs: Vec<Observation> = rows
                .iter()
                .filter(|r| r.n_1e.is_finite() && r.n_1e_err.is_finite() && r.n_1e_err > 0.0)
                .map(|r| Observation::with_sigma(r.coords[0] * 1e9, r.n_1e, r.n_1e_err))
                .collect();
            match fit_saturation(&obs, &cfg.fit.options()) {
                Ok(f) if f.converged => {
                    ctx.say(format!(
                        "{name}: N_sat = {}, P_sat = {} nW [{} powers, seed {}, digest {}]",
                        with_err(f.value("n_sat"), f.std_err("n_sat")),
                        with_err(f.value("p_sat"), f.std_err("p_sat")),
                        rows.len(),
                        cfg.seed,
                        &digest[..12]
                    ));
                    Some(f)
                }
                Ok(_) => {
                    ctx.fit_failed(&format!("{name} saturation"), "did not converge")?;
                    None
                }
                Err(e) => {
                    ctx.fit_failed(&format!("{name} saturation"), &e.to_string())?;
                    None
                }
            }
        } else {
            let best = rows.iter().filter(|r| r.n_1e.is_finite()).map(|r| r.n_1e).fold(f64::NAN, f64::max);
            ctx.say(format!("{name}: {} points, max N_1/e = {:.0} [seed {}, digest {}]", rows.len(), best, cfg.seed, &digest[..12]));
            None
        };
        result.push(SweepScenario { name, axes: axis_names, rows, saturation, csv: file });
    }
    let summary = SweepSummary {
        schema: cfg.schema.clone(),
        command: "sweep".into(),
        config_digest: digest,
        master_seed: cfg.seed,
        scenarios: result,
    };
    out.json(&format!("{label}_summary.json"), &summary)?;
    Ok(summary)
}

/// Revival scans over the post-repump delay, one per scenario.
#[derive(Debug, Clone, Serialize)]
pub struct RevivalSummary {
    pub config_digest: String,
    pub scenarios: Vec<RevivalScenario>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RevivalScenario {
    pub name: String,
    pub delta_omega: f64,
    pub phase_matched_delay: f64,
    /// Local maxima of the scan (s).
    pub maxima: Vec<f64>,
    pub csv: String,
}

pub fn revival(ctx: &mut Ctx, cfg: &ScenarioConfig, sub: Option<&str>) -> CliResult<RevivalSummary> {
    let rv = cfg.revival.as_ref().ok_or_else(|| CliError::schema("revival: section is required"))?;
    if rv.points < 3 {
        return Err(CliError::schema("revival.points: need at least 3"));
    }
    let digest = cfg.digest();
    let label = slug(&cfg.label());
    let mut out = ctx.out(sub)?;
    out.text(&format!("{label}_effective.toml"), &cfg.effective_toml())?;
    let grid: Vec<f64> = (0..rv.points).map(|k| rv.t_max.0 * k as f64 / (rv.points - 1) as f64).collect();
    let mut scenarios = Vec::new();
    for sc in cfg.scenarios()? {
        let spec = &sc.spec;
        let curve = revival_curve(&spec.spin, &spec.field, &spec.seq, &grid, rv.attempts, spec.noise.p_init, 1.0)
            .map_err(|e| CliError::at(&sc.name, e))?;
        let mut t = Table::new(&["post_repump_delay", "coherence", "seed", "config_digest"]);
        for p in &curve {
            t.push(vec![num(p.post_repump_delay), num(p.coherence), cfg.seed.to_string(), digest.clone()]);
        }
        let file = format!("{label}_{}.csv", slug(&sc.name));
        out.csv(&file, &t)?;
        let maxima: Vec<f64> = curve
            .windows(3)
            .filter(|w| w[1].coherence >= w[0].coherence && w[1].coherence > w[2].coherence)
            .map(|w| w[1].post_repump_delay)
            .collect();
        let dw = nvsim_core::physics::delta_omega(&spec.spin, &spec.field);
        let matched = std::f64::consts::TAU / dw;
        ctx.say(format!(
            "{}: revival maxima at T = [{}] us, phase matching at {:.3} us",
            sc.name,
            maxima.iter().map(|t| format!("{:.3}", t * 1e6)).collect::<Vec<_>>().join(", "),
            matched * 1e6
        ));
        scenarios.push(RevivalScenario { name: sc.name, delta_omega: dw, phase_matched_delay: matched, maxima, csv: file });
    }
    let summary = RevivalSummary { config_digest: digest, scenarios };
    out.json(&format!("{label}_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct PumpProbeSummary {
    pub config_digest: String,
    pub master_seed: u64,
    pub trials: u64,
    pub stats: ExcitationStats,
    pub fit: Option<FitResult>,
    pub singlet_lifetime: f64,
    pub singlet_lifetime_err: f64,
    pub asymptote: f64,
    pub branching: Option<BranchingEstimate>,
    pub csv: String,
}

pub fn pumpprobe(ctx: &mut Ctx, cfg: &ScenarioConfig, sub: Option<&str>) -> CliResult<PumpProbeSummary> {
    let model = cfg.optical_model()?;
    let (pump, delays, pp, step) = cfg.pump_probe()?;
    let digest = cfg.digest();
    let label = slug(&cfg.label());
    let mut out = ctx.out(sub)?;
    out.text(&format!("{label}_effective.toml"), &cfg.effective_toml())?;
    let ppc = PumpProbeConfig { pump, delays, probe_window: pp.probe_window.0, trials: pp.trials, seed: cfg.seed, mode: pp.mode, step };
    let curve = pump_probe_curve(&model, &ppc).map_err(|e| CliError::at("pumpprobe", e))?;
    let mut t = Table::new(&["delay", "f0", "std_err", "seed", "config_digest"]);
    for p in &curve.points {
        t.push(vec![num(p.delay), num(p.f0), num(p.std_err), cfg.seed.to_string(), digest.clone()]);
    }
    let file = format!("{label}.csv");
    out.csv(&file, &t)?;
    let opts = cfg.fit.options();
    let fit = match curve.fit_rise(&opts) {
        Ok(f) if f.converged => Some(f),
        Ok(_) => {
            ctx.fit_failed("pumpprobe", "did not converge")?;
            None
        }
        Err(e) => {
            ctx.fit_failed("pumpprobe", &e.to_string())?;
            None
        }
    };
    let (tau, tau_err, asym) = match &fit {
        Some(f) => (f.value("timescale"), f.std_err("timescale"), f.value("amplitude") + f.value("offset")),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    let branching = if asym.is_finite() && asym > 0.0 {
        branching_estimates(&model, &pump, asym.min(curve.stats.p_s), pp.trials.min(20_000), cfg.seed).ok()
    } else {
        None
    };
    let ratio = branching.map(|b| {
        let (r0, _, r1) = b.jump.ratio();
        r0 / r1
    });
    ctx.say(format!(
        "pumpprobe: singlet lifetime = {} ns, p_s = {}, double excitation = {}, branching {} [{} trials, seed {}, digest {}]",
        with_err(tau * 1e9, tau_err * 1e9),
        with_err(curve.stats.p_s, curve.stats.p_s_err),
        with_err(curve.stats.p_double, curve.stats.p_double_err),
        ratio.map_or("n/a".into(), |r| format!("{r:.1}:1:1")),
        pp.trials,
        cfg.seed,
        &digest[..12]
    ));
    let summary = PumpProbeSummary {
        config_digest: digest,
        master_seed: cfg.seed,
        trials: pp.trials,
        stats: curve.stats,
        fit,
        singlet_lifetime: tau,
        singlet_lifetime_err: tau_err,
        asymptote: asym,
        branching,
        csv: file,
    };
    out.json(&format!("{label}_summary.json"), &summary)?;
    Ok(summary)
}

/// Closed-form predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictModel {
    /// Exponential-dwell repump dephasing.
    Blok,
    /// Initialization failures, coherence against N.
    Binomial,
    /// Initialization failures, coherence against the post-repump delay.
    Revival,
}

#[derive(Debug, Clone)]
pub struct PredictArgs {
    pub model: PredictModel,
    pub delta_omega: Freq,
    pub tau: Option<Time>,
    pub p1: f64,
    pub p_init: f64,
    pub attempts: Option<u64>,
    pub post_repump: Time,
    pub delay: Delay,
    pub t_max: Option<Time>,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictSummary {
    pub model: String,
    pub n_1e: Option<f64>,
    pub csv: String,
}

pub fn predict(ctx: &mut Ctx, a: &PredictArgs) -> CliResult<PredictSummary> {
    if a.points < 2 {
        return Err(CliError::schema("--points: need at least 2"));
    }
    let dw = a.delta_omega.angular();
    let mut out = ctx.out(None)?;
    let spin = NuclearSpinParams::direct("spin", dw, f64::INFINITY)
        .or_else(|_| NuclearSpinParams::direct("spin", dw, 1.0))
        .map_err(|e| CliError::at("--dw", e))?;
    let field = FieldParams::reference_414g();
    let seq = AttemptSequence { attempt_duration: None, ..AttemptSequence::standard(a.delay) };
    match a.model {
        PredictModel::Blok => {
            let tau = a.tau.ok_or_else(|| CliError::schema("--tau: required for the blok model"))?;
            let base = BlokParams { tau: tau.0, delta_omega: dw, p1: a.p1, n: 0.0 };
            base.validate().map_err(|e| CliError::at("predict", e))?;
            let n1e = base.n_1e();
            let n_max = a.attempts.unwrap_or_else(|| if n1e.is_finite() { (3.0 * n1e).ceil() as u64 } else { 1000 });
            let mut t = Table::new(&["n", "coherence"]);
            for k in 0..a.points {
                let n = (n_max as f64 * k as f64 / (a.points - 1) as f64).round();
                t.push(vec![num(n), num(blok_coherence(&BlokParams { n, ..base }))]);
            }
            let file = "predict_blok.csv".to_string();
            out.csv(&file, &t)?;
            ctx.say(format!("blok: N_1/e = {n1e:.1} (tau = {} ns, dw = 2pi x {} kHz, p1 = {})", tau.0 * 1e9, a.delta_omega.0 / 1e3, a.p1));
            Ok(PredictSummary { model: "blok".into(), n_1e: Some(n1e), csv: file })
        }
        PredictModel::Binomial => {
            let ph = failure_phases(&seq, &spin, &field, a.post_repump.0).map_err(|e| CliError::at("predict", e))?;
            let n_max = a.attempts.unwrap_or(2000);
            let mut t = Table::new(&["n", "coherence"]);
            let mut n1e = None;
            for k in 0..a.points {
                let n = (n_max as f64 * k as f64 / (a.points - 1) as f64).round() as u64;
                let c = binomial_coherence(n, a.p_init, &ph, 1.0);
                if n1e.is_none() && c < (-1.0f64).exp() {
                    n1e = Some(n as f64);
                }
                t.push(vec![n.to_string(), num(c)]);
            }
            let file = "predict_binomial.csv".to_string();
            out.csv(&file, &t)?;
            ctx.say(format!(
                "binomial: p_init = {}, 1/e crossing {}",
                a.p_init,
                n1e.map_or("beyond the grid".into(), |n| format!("near N = {n}"))
            ));
            Ok(PredictSummary { model: "binomial".into(), n_1e: n1e, csv: file })
        }
        PredictModel::Revival => {
            let matched = std::f64::consts::TAU / dw;
            let t_max = a.t_max.map_or(2.5 * matched, |t| t.0);
            let grid: Vec<f64> = (0..a.points).map(|k| t_max * k as f64 / (a.points - 1) as f64).collect();
            let n = a.attempts.unwrap_or(700);
            let curve = revival_curve(&spin, &field, &seq, &grid, n, a.p_init, 1.0).map_err(|e| CliError::at("predict", e))?;
            let mut t = Table::new(&["post_repump_delay", "coherence"]);
            for p in &curve {
                t.push(vec![num(p.post_repump_delay), num(p.coherence)]);
            }
            let file = "predict_revival.csv".to_string();
            out.csv(&file, &t)?;
            ctx.say(format!("revival: N = {n}, p_init = {}, phase matching at T = {:.3} us", a.p_init, matched * 1e6));
            Ok(PredictSummary { model: "revival".into(), n_1e: None, csv: file })
        }
    }
}

/// Fit forms accepted by the `fit` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitKind {
    Stretched,
    Saturation,
    ExponentialRise,
    ExponentialDecay,
}

pub struct FitArgs {
    pub input: PathBuf,
    pub kind: FitKind,
    pub x: Option<String>,
    pub y: Option<String>,
    pub sigma: Option<String>,
    pub fix_m: Option<f64>,
    pub unweighted: bool,
}

const X_NAMES: &[&str] = &["n", "x", "delay", "post_repump_delay", "repump_power", "value"];
const Y_NAMES: &[&str] = &["coherence", "y", "f0", "n_1e"];
const SIGMA_NAMES: &[&str] = &["std_err", "sigma", "n_1e_err"];

pub fn read_observations(path: &Path, x: Option<&str>, y: Option<&str>, sigma: Option<&str>) -> CliResult<Vec<Observation>> {
    let io = |e: csv::Error| CliError::io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let header = r.headers().map_err(io)?.clone();
    let find = |explicit: Option<&str>, names: &[&str], what: &str| -> CliResult<Option<usize>> {
        if let Some(name) = explicit {
            return header
                .iter()
                .position(|h| h == name)
                .map(Some)
                .ok_or_else(|| CliError::schema(format!("{}: no column named {name:?}", path.display())));
        }
        let found = names.iter().find_map(|n| header.iter().position(|h| h == *n));
        if found.is_none() && what != "sigma" {
            return Err(CliError::schema(format!("{}: no {what} column (looked for {})", path.display(), names.join(", "))));
        }
        Ok(found)
    };
    let xi = find(x, X_NAMES, "x")?.expect("x column");
    let yi = find(y, Y_NAMES, "y")?.expect("y column");
    let si = find(sigma, SIGMA_NAMES, "sigma")?;
    let mut obs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(io)?;
        let cell = |i: usize| -> CliResult<f64> {
            let s = rec.get(i).unwrap_or("");
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::schema(format!("{} row {}: {:?} is not a number", path.display(), line + 2, s)))
        };
        let (xv, yv) = (cell(xi)?, cell(yi)?);
        if !xv.is_finite() || !yv.is_finite() {
            continue;
        }
        let o = match si {
            Some(i) => Observation::with_sigma(xv, yv, cell(i)?),
            None => Observation::new(xv, yv),
        };
        obs.push(o);
    }
    Ok(obs)
}

pub fn fit(ctx: &mut Ctx, a: &FitArgs) -> CliResult<FitResult> {
    let obs = read_observations(&a.input, a.x.as_deref(), a.y.as_deref(), a.sigma.as_deref())?;
    let opts = if a.unweighted { FitOptions::unweighted() } else { FitOptions::default() };
    let r = match a.kind {
        FitKind::Stretched => fit_stretched_exp(&obs, a.fix_m, &opts),
        FitKind::Saturation => fit_saturation(&obs, &opts),
        FitKind::ExponentialRise => fit_exponential(&obs, Direction::Rise, &opts),
        FitKind::ExponentialDecay => fit_exponential(&obs, Direction::Decay, &opts),
    };
    let what = a.input.display().to_string();
    let r = match r {
        Ok(f) if f.converged => f,
        Ok(f) => {
            ctx.fit_failed(&what, "did not converge")?;
            f
        }
        Err(e) => {
            return Err(CliError::new(ErrorKind::Fit, format!("{what}: fit failed: {e}")));
        }
    };
    let stem = a.input.file_stem().map_or("fit".into(), |s| s.to_string_lossy().to_string());
    let mut out = ctx.out(None)?;
    out.json(&format!("{}_fit.json", slug(&stem)), &r)?;
    let line = r
        .parameters
        .iter()
        .map(|p| format!("{} = {}", p.name, if p.fixed { format!("{} (fixed)", p.value) } else { with_err(p.value, p.std_err) }))
        .collect::<Vec<_>>()
        .join(", ");
    ctx.say(format!("{what}: {line}, chi2/dof = {:.3}", r.chi_squared / r.dof.max(1) as f64));
    Ok(r)
}

/// Bundled reference set as pretty JSON.
pub fn reference_json() -> String {
    serde_json::to_string_pretty(reference()).expect("reference set serializes")
}
