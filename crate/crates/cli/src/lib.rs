//! Command-line front end: scenario files in, CSV tables and JSON summaries out.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod reproduce;
pub mod units;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nvsim_core::montecarlo::DEFAULT_ATTEMPT_BUDGET;
use nvsim_core::Delay;

use crate::commands::{Ctx, FitArgs, FitKind, PredictArgs, PredictModel};
use crate::config::{Overrides, ScenarioConfig};
use crate::error::{CliError, CliResult};
use crate::units::{Freq, Time};

pub use error::ErrorKind;

/// Environment variable capping the total attempt count of one invocation.
pub const BUDGET_ENV: &str = "NVSIM_BUDGET";

#[derive(Debug, Parser)]
#[command(name = "nvsim", version, about = "Nuclear-spin memory dephasing under repeated entangling attempts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overrides the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Trials per curve, overrides the file.
    #[arg(long, global = true)]
    pub trials: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Exit with status 4 when any fit fails.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress summary lines on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate coherence curves for every scenario of --config and fit them.
    Simulate,
    /// Sweep the axes of the [sweep] section and fit every point.
    Sweep,
    /// Closed-form predictions.
    Predict(PredictCli),
    /// Post-repump delay scan of the [revival] section.
    Revival,
    /// Pump-probe on the optical level scheme ([optical] and [pumpprobe]; defaults without --config).
    Pumpprobe,
    /// Fit a CSV curve.
    Fit(FitCli),
    /// Regenerate the data tables behind a figure from its bundled config.
    Reproduce(ReproduceCli),
    /// Print the bundled reference set (spins, optical rows, quoted decay constants).
    Reference,
    /// Print a bundled figure config.
    ShowConfig {
        figure: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Blok,
    Binomial,
    Revival,
}

#[derive(Debug, Args)]
pub struct PredictCli {
    #[arg(long, value_enum, default_value = "blok")]
    pub model: ModelArg,
    /// Coupling strength as a cyclic frequency, e.g. 376.5kHz.
    #[arg(long = "dw", value_parser = parse_freq, conflicts_with = "spin")]
    pub delta_omega: Option<Freq>,
    /// Take the coupling from the bundled spin table (C1..C7).
    #[arg(long)]
    pub spin: Option<String>,
    /// Mean repump time, e.g. 52ns.
    #[arg(long, value_parser = parse_time)]
    pub tau: Option<Time>,
    /// Probability that the electron is bright when the repump starts.
    #[arg(long, default_value_t = 0.5)]
    pub p1: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_init: f64,
    /// Largest N (blok, binomial) or the N of the scan (revival).
    #[arg(long)]
    pub attempts: Option<u64>,
    #[arg(long, value_parser = parse_time, default_value = "0ns")]
    pub post_repump: Time,
    /// Inter-pulse delay: larmor[:k], phase_matched[:k] or a time.
    #[arg(long, default_value = "larmor:1")]
    pub delay: String,
    #[arg(long, value_parser = parse_time)]
    pub t_max: Option<Time>,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FitFormArg {
    Stretched,
    Saturation,
    ExponentialRise,
    ExponentialDecay,
}

#[derive(Debug, Args)]
pub struct FitCli {
    /// CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "stretched")]
    pub form: FitFormArg,
    #[arg(long)]
    pub x: Option<String>,
    #[arg(long)]
    pub y: Option<String>,
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub fix_m: Option<f64>,
    #[arg(long)]
    pub unweighted: bool,
}

#[derive(Debug, Args)]
pub struct ReproduceCli {
    /// fig1d, fig2, fig3a, fig3b, fig4a, fig4b, fig5b or all.
    pub figure: String,
}

fn parse_time(s: &str) -> Result<Time, String> {
    Time::parse(s)
}

fn parse_freq(s: &str) -> Result<Freq, String> {
    Freq::parse(s)
}

/// Attempt budget from the environment, or the default.
pub fn budget_from_env() -> CliResult<u64> {
    match std::env::var(BUDGET_ENV) {
        Ok(v) => {
            let x: f64 = v.trim().parse().map_err(|_| CliError::schema(format!("{BUDGET_ENV}: {v:?} is not a number")))?;
            if !(x >= 0.0 && x.is_finite()) {
                return Err(CliError::schema(format!("{BUDGET_ENV}: must be a non-negative count, got {v:?}")));
            }
            Ok(x.min(u64::MAX as f64) as u64)
        }
        Err(_) => Ok(DEFAULT_ATTEMPT_BUDGET),
    }
}

fn load_config(g: &GlobalArgs) -> CliResult<ScenarioConfig> {
    let path = g.config.as_ref().ok_or_else(|| CliError::schema("--config: required for this command"))?;
    let mut cfg = ScenarioConfig::load(path)?;
    cfg.apply(&overrides(g));
    Ok(cfg)
}

fn overrides(g: &GlobalArgs) -> Overrides {
    Overrides { seed: g.seed, trials: g.trials }
}

fn out_dir(g: &GlobalArgs, cfg: Option<&ScenarioConfig>) -> PathBuf {
    g.out_dir
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.dir.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("nvsim-out"))
}

/// Runs one invocation and returns its summary lines.
pub fn execute(cli: Cli) -> CliResult<Vec<String>> {
    let g = cli.global.clone();
    let run = move || -> CliResult<Vec<String>> {
        let budget = budget_from_env()?;
        let mut ctx = Ctx::new(out_dir(&g, None), g.strict, budget);
        ctx.quiet = g.quiet;
        match cli.command {
            Command::Simulate => {
                let cfg = load_config(&g)?;
                ctx.out_dir = out_dir(&g, Some(&cfg));
                commands::simulate(&mut ctx, &cfg, None)?;
            }
            Command::Sweep => {
                let cfg = load_config(&g)?;
                ctx.out_dir = out_dir(&g, Some(&cfg));
                commands::run_sweep(&mut ctx, &cfg, None)?;
            }
            Command::Revival => {
                let cfg = load_config(&g)?;
                ctx.out_dir = out_dir(&g, Some(&cfg));
                commands::revival(&mut ctx, &cfg, None)?;
            }
            Command::Pumpprobe => {
                let cfg = match &g.config {
                    Some(_) => load_config(&g)?,
                    None => {
                        let mut c = reproduce::bundled_config("fig3a", &overrides(&g))?;
                        c.name = Some("pumpprobe".into());
                        c
                    }
                };
                ctx.out_dir = out_dir(&g, Some(&cfg));
                commands::pumpprobe(&mut ctx, &cfg, None)?;
            }
            Command::Predict(p) => {
                let delta_omega = match (p.delta_omega, &p.spin) {
                    (Some(dw), _) => dw,
                    (None, Some(label)) => {
                        let s = nvsim_core::reference().spin(label).map_err(|e| CliError::at("--spin", e))?;
                        Freq(s.delta_omega_khz * 1e3)
                    }
                    (None, None) => return Err(CliError::schema("--dw: give the coupling or --spin")),
                };
                let delay: Delay = config::DelaySpec::parse_arg(&p.delay).map_err(|e| CliError::schema(format!("--delay: {e}")))?;
                let args = PredictArgs {
                    model: match p.model {
                        ModelArg::Blok => PredictModel::Blok,
                        ModelArg::Binomial => PredictModel::Binomial,
                        ModelArg::Revival => PredictModel::Revival,
                    },
                    delta_omega,
                    tau: p.tau,
                    p1: p.p1,
                    p_init: p.p_init,
                    attempts: p.attempts,
                    post_repump: p.post_repump,
                    delay,
                    t_max: p.t_max,
                    points: p.points,
                };
                commands::predict(&mut ctx, &args)?;
            }
            Command::Fit(f) => {
                let args = FitArgs {
                    input: f.input,
                    kind: match f.form {
                        FitFormArg::Stretched => FitKind::Stretched,
                        FitFormArg::Saturation => FitKind::Saturation,
                        FitFormArg::ExponentialRise => FitKind::ExponentialRise,
                        FitFormArg::ExponentialDecay => FitKind::ExponentialDecay,
                    },
                    x: f.x,
                    y: f.y,
                    sigma: f.sigma,
                    fix_m: f.fix_m,
                    unweighted: f.unweighted,
                };
                commands::fit(&mut ctx, &args)?;
            }
            Command::Reproduce(r) => {
                let o = overrides(&g);
                let figures: Vec<&str> =
                    if r.figure == "all" { reproduce::FIGURES.to_vec() } else { vec![r.figure.as_str()] };
                for fig in figures {
                    reproduce::reproduce(&mut ctx, fig, &o)?;
                }
            }
            Command::Reference => {
                println!("{}", commands::reference_json());
            }
            Command::ShowConfig { figure } => {
                let text = reproduce::bundled(&figure).ok_or_else(|| {
                    CliError::schema(format!("unknown figure {figure:?} (known: {})", reproduce::FIGURES.join(", ")))
                })?;
                print!("{text}");
            }
        }
        Ok(ctx.lines)
    };
    match cli.global.threads {
        Some(n) => {
            if n == 0 {
                return Err(CliError::schema("--threads: must be at least 1"));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::io(format!("thread pool: {e}")))?;
            pool.install(run)
        }
        None => run(),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
