//! Scenario files: TOML documents with unit-suffixed quantities.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use nvsim_core::optical::{isc_rate_from_lifetimes, Branching, OpticalLevelModel, ProbeMode, PulseEnvelope, PulseShape, StepControl};
use nvsim_core::{
    reference, AdaptiveGrid, AttemptSequence, Delay, FieldParams, FitOptions, InitialNuclearState, NoiseModel,
    NuclearSpinParams, RepumpPowerLaw, RunSpec, SweepAxis,
};

use crate::error::{CliError, CliResult};
use crate::units::{Angle, Field, Freq, Power, Time};

pub const SCHEMA_ID: &str = "nvsim.scenario/1";

fn default_seed() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin: Option<SpinSection>,
    #[serde(default)]
    pub sequence: SequenceSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, rename = "variant", skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revival: Option<RevivalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optical: Option<OpticalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pumpprobe: Option<PumpProbeSection>,
}

/// Exactly one of `strength` and `larmor`; neither means 414 G.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<Field>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub larmor: Option<Freq>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinSection {
    /// Label from the bundled spin table (C1..C7).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_omega: Option<Freq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_par: Option<Freq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_perp: Option<Freq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_star: Option<Time>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_hahn: Option<Time>,
    /// Use the exact hyperfine frequencies for ms=+-1 instead of w0 -+ dw.
    #[serde(default)]
    pub exact_frequencies: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    #[default]
    Standard,
    Shortened,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySpec(pub Delay);

impl DelaySpec {
    pub fn parse_arg(s: &str) -> Result<Delay, String> {
        Self::parse(s).map(|d| d.0)
    }

    fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (rule, count) = match s.split_once(':') {
            Some((r, c)) => (r.trim(), Some(c.trim())),
            None => (s, None),
        };
        let count = || -> Result<u32, String> {
            match count {
                None => Ok(1),
                Some(c) => c.parse().map_err(|_| format!("invalid period count {c:?} in delay {s:?}")),
            }
        };
        match rule {
            "larmor" => Ok(Self(Delay::LarmorPeriods { count: count()? })),
            "phase_matched" => Ok(Self(Delay::PhaseMatched { count: count()? })),
            _ => Time::parse(s)
                .map(|t| Self(Delay::Seconds { value: t.0 }))
                .map_err(|e| format!("{e}; or use \"larmor[:k]\" / \"phase_matched[:k]\"")),
        }
    }
}

impl Default for DelaySpec {
    fn default() -> Self {
        Self(Delay::LarmorPeriods { count: 1 })
    }
}

impl fmt::Display for DelaySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Delay::LarmorPeriods { count } => write!(f, "larmor:{count}"),
            Delay::PhaseMatched { count } => write!(f, "phase_matched:{count}"),
            Delay::Seconds { value } => write!(f, "{}", Time(value)),
        }
    }
}

impl Serialize for DelaySpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DelaySpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        DelaySpec::parse(&s).map_err(de::Error::custom)
    }
}

/// `"auto"` (sum of the parts) or a fixed time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttemptLength {
    Auto,
    Fixed(Time),
}

impl Serialize for AttemptLength {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AttemptLength::Auto => s.serialize_str("auto"),
            AttemptLength::Fixed(t) => t.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for AttemptLength {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.trim() == "auto" {
            return Ok(AttemptLength::Auto);
        }
        Time::parse(&s).map(AttemptLength::Fixed).map_err(|e| de::Error::custom(format!("{e}; or \"auto\"")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSection {
    #[serde(default)]
    pub kind: SequenceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Angle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub middle_pi: Option<bool>,
    #[serde(default)]
    pub delay: DelaySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_repump_delay: Option<Time>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repump_duration: Option<Time>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt_duration: Option<AttemptLength>,
    #[serde(default)]
    pub generic_alpha: bool,
}

fn zero_time() -> Time {
    Time(0.0)
}

fn zero_freq() -> Freq {
    Freq(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub p_mw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_mw_alpha: Option<f64>,
    #[serde(default)]
    pub p_init: f64,
    #[serde(default = "zero_time")]
    pub tau: Time,
    #[serde(default = "zero_time")]
    pub sigma_tau_qs: Time,
    /// Cyclic width; the run-to-run detuning is drawn with 2 pi times this.
    #[serde(default = "zero_freq")]
    pub sigma_detuning_qs: Freq,
    #[serde(default)]
    pub p_depol_per_attempt: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            p_mw: 0.0,
            p_mw_alpha: None,
            p_init: 0.0,
            tau: Time(0.0),
            sigma_tau_qs: Time(0.0),
            sigma_detuning_qs: Freq(0.0),
            p_depol_per_attempt: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttemptGrid {
    List { values: Vec<u64> },
    /// `points` evenly spaced counts ending at `stop`.
    Linear { stop: u64, points: usize },
    Log { start: u64, stop: u64, points: usize },
    /// Chosen around a pilot estimate of the 1/e crossing.
    Adaptive {
        #[serde(default = "adaptive_points")]
        points: usize,
        #[serde(default = "adaptive_span")]
        span: f64,
        #[serde(default = "adaptive_pilot")]
        pilot_trials: u64,
        #[serde(default = "adaptive_max")]
        max_attempts: u64,
    },
}

fn adaptive_points() -> usize {
    AdaptiveGrid::default().points
}
fn adaptive_span() -> f64 {
    AdaptiveGrid::default().span
}
fn adaptive_pilot() -> u64 {
    AdaptiveGrid::default().pilot_trials
}
fn adaptive_max() -> u64 {
    AdaptiveGrid::default().max_attempts
}

impl Default for AttemptGrid {
    fn default() -> Self {
        AttemptGrid::Adaptive {
            points: adaptive_points(),
            span: adaptive_span(),
            pilot_trials: adaptive_pilot(),
            max_attempts: adaptive_max(),
        }
    }
}

/// Either concrete attempt counts or pilot settings.
#[derive(Debug, Clone, PartialEq)]
pub enum GridChoice {
    Fixed(Vec<u64>),
    Adaptive(AdaptiveGrid),
}

impl AttemptGrid {
    pub fn resolve(&self, path: &str) -> CliResult<GridChoice> {
        let bad = |msg: String| CliError::schema(format!("{path}: {msg}"));
        let grid = match *self {
            AttemptGrid::List { ref values } => {
                let mut v = values.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
            AttemptGrid::Linear { stop, points } => {
                if points == 0 || stop == 0 {
                    return Err(bad("linear grid needs stop >= 1 and points >= 1".into()));
                }
                let mut v: Vec<u64> =
                    (1..=points).map(|k| ((stop as f64) * k as f64 / points as f64).round() as u64).filter(|&n| n > 0).collect();
                v.dedup();
                v
            }
            AttemptGrid::Log { start, stop, points } => {
                if start == 0 || stop <= start || points < 2 {
                    return Err(bad("log grid needs 1 <= start < stop and points >= 2".into()));
                }
                let (a, b) = ((start as f64).ln(), (stop as f64).ln());
                let mut v: Vec<u64> =
                    (0..points).map(|k| (a + (b - a) * k as f64 / (points - 1) as f64).exp().round() as u64).collect();
                v.dedup();
                v
            }
            AttemptGrid::Adaptive { points, span, pilot_trials, max_attempts } => {
                return Ok(GridChoice::Adaptive(AdaptiveGrid { pilot_trials, points, span, max_attempts }));
            }
        };
        if grid.is_empty() {
            return Err(bad("attempt grid is empty".into()));
        }
        Ok(GridChoice::Fixed(grid))
    }
}

fn default_trials() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub attempts: AttemptGrid,
    #[serde(default)]
    pub echoes: u8,
    #[serde(default)]
    pub initial_state: InitialNuclearState,
    #[serde(default = "yes")]
    pub intrinsic_envelope: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            attempts: AttemptGrid::default(),
            echoes: 0,
            initial_state: InitialNuclearState::default(),
            intrinsic_envelope: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitForm {
    #[default]
    Stretched,
    ExponentialDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default)]
    pub form: FitForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fix_m: Option<f64>,
    #[serde(default = "yes")]
    pub weighted: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        Self { form: FitForm::Stretched, fix_m: None, weighted: true }
    }
}

impl FitSection {
    pub fn options(&self) -> FitOptions {
        if self.weighted {
            FitOptions::default()
        } else {
            FitOptions::unweighted()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
}

/// A named scenario; every present section replaces the base one wholesale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin: Option<SpinSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echoes: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<AttemptGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisName {
    /// Values in W; needs `tau_min` and `p_sat`.
    RepumpPower,
    PMw,
    PInit,
    /// Values in G.
    Field,
    FieldScale,
    /// Values in s.
    Tau,
    /// Values in Hz (cyclic).
    DeltaOmega,
}

impl AxisName {
    pub fn as_str(self) -> &'static str {
        match self {
            AxisName::RepumpPower => "repump_power",
            AxisName::PMw => "p_mw",
            AxisName::PInit => "p_init",
            AxisName::Field => "field",
            AxisName::FieldScale => "field_scale",
            AxisName::Tau => "tau",
            AxisName::DeltaOmega => "delta_omega",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSection {
    pub name: AxisName,
    pub values: Vec<SweepValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_min: Option<Time>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_sat: Option<Power>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<RepumpPowerLaw>,
}

/// Parsed axis: core axis, values in the units the core expects, values as written.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: AxisName,
    pub core: SweepAxis,
    pub values: Vec<f64>,
}

impl AxisSection {
    pub fn resolve(&self, path: &str) -> CliResult<Axis> {
        if self.values.is_empty() {
            return Err(CliError::schema(format!("{path}.values: must not be empty")));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for (i, v) in self.values.iter().enumerate() {
            let p = format!("{path}.values[{i}]");
            let parsed = match (self.name, v) {
                (AxisName::PMw | AxisName::PInit | AxisName::FieldScale, SweepValue::Number(x)) => Ok(*x),
                (AxisName::PMw | AxisName::PInit | AxisName::FieldScale, SweepValue::Text(s)) => {
                    Err(format!("expected a plain number, got {s:?}"))
                }
                (_, SweepValue::Number(x)) => Err(format!("bare number {x} has no unit")),
                (AxisName::RepumpPower, SweepValue::Text(s)) => Power::parse(s).map(|q| q.0),
                (AxisName::Field, SweepValue::Text(s)) => Field::parse(s).map(|q| q.0),
                (AxisName::Tau, SweepValue::Text(s)) => Time::parse(s).map(|q| q.0),
                (AxisName::DeltaOmega, SweepValue::Text(s)) => Freq::parse(s).map(|q| q.angular()),
            };
            values.push(parsed.map_err(|e| CliError::schema(format!("{p}: {e}")))?);
        }
        let core = match self.name {
            AxisName::RepumpPower => {
                let tau_min =
                    self.tau_min.ok_or_else(|| CliError::schema(format!("{path}.tau_min: required for repump_power")))?;
                let p_sat = self.p_sat.ok_or_else(|| CliError::schema(format!("{path}.p_sat: required for repump_power")))?;
                SweepAxis::RepumpPower { tau_min: tau_min.0, p_sat: p_sat.0, law: self.law.unwrap_or_default() }
            }
            AxisName::PMw => SweepAxis::PMw,
            AxisName::PInit => SweepAxis::PInit,
            AxisName::Field => SweepAxis::FieldGauss,
            AxisName::FieldScale => SweepAxis::FieldScale,
            AxisName::Tau => SweepAxis::Tau,
            AxisName::DeltaOmega => SweepAxis::DeltaOmega,
        };
        Ok(Axis { name: self.name, core, values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Cartesian product of all axes, the last varying fastest.
    #[serde(rename = "axis")]
    pub axes: Vec<AxisSection>,
    /// Fit N_sat P / (P + P_sat) over a repump-power axis.
    #[serde(default)]
    pub saturation_fit: bool,
}

fn default_revival_points() -> usize {
    201
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevivalSection {
    pub attempts: u64,
    pub t_max: Time,
    #[serde(default = "default_revival_points")]
    pub points: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_ex: Option<Time>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_e_prime: Option<Time>,
    /// ISC rate out of E' (cyclic); derived from the two lifetimes if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isc_rate: Option<Freq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isc_rate_ex: Option<Freq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_s: Option<Time>,
    /// `"b0:b+:b-"`, e.g. `"8:1:1"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branching: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strain_shift: Option<Freq>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    #[default]
    Gaussian,
    Square,
}

fn default_pp_trials() -> u64 {
    20_000
}
fn default_delay_stop() -> Time {
    Time(2e-6)
}
fn default_delay_points() -> usize {
    21
}
fn default_probe_window() -> Time {
    Time(40e-9)
}
fn default_pulse_width() -> Time {
    Time(2.6e-9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpProbeSection {
    #[serde(default)]
    pub pulse: PulseKind,
    /// FWHM of the intensity (gaussian) or full length (square).
    #[serde(default = "default_pulse_width")]
    pub pulse_width: Time,
    /// Peak Rabi frequency (cyclic); absent means a calibrated pi pulse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_rabi: Option<Freq>,
    #[serde(default = "zero_time")]
    pub delay_start: Time,
    #[serde(default = "default_delay_stop")]
    pub delay_stop: Time,
    #[serde(default = "default_delay_points")]
    pub delay_points: usize,
    #[serde(default = "default_probe_window")]
    pub probe_window: Time,
    #[serde(default = "default_pp_trials")]
    pub trials: u64,
    #[serde(default)]
    pub mode: ProbeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rate_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_dt: Option<Time>,
}

impl Default for PumpProbeSection {
    fn default() -> Self {
        Self {
            pulse: PulseKind::Gaussian,
            pulse_width: default_pulse_width(),
            peak_rabi: None,
            delay_start: Time(0.0),
            delay_stop: default_delay_stop(),
            delay_points: default_delay_points(),
            probe_window: default_probe_window(),
            trials: default_pp_trials(),
            mode: ProbeMode::Onset,
            max_rate_dt: None,
            fixed_dt: None,
        }
    }
}

/// One concrete simulation: name, run spec and how to pick its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub spec: RunSpec,
    pub grid: GridChoice,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<u64>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::schema(format!("config: {}", e.message())))?;
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::schema(format!("{path}: {}", inner.message()))
        })?;
        cfg.check_schema()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError { message: format!("{}: {}", path.display(), e.message), ..e })
    }

    fn check_schema(&self) -> CliResult<()> {
        if self.schema != SCHEMA_ID {
            return Err(CliError::schema(format!("schema: expected {SCHEMA_ID:?}, got {:?}", self.schema)));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(trials) = o.trials {
            self.run.trials = trials;
            for v in &mut self.variants {
                if v.trials.is_some() {
                    v.trials = Some(trials);
                }
            }
            if let Some(pp) = &mut self.pumpprobe {
                pp.trials = trials;
            }
        }
    }

    /// The config as it will run, in canonical form.
    pub fn effective_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.effective_toml().as_bytes()))
    }

    pub fn label(&self) -> String {
        self.output.prefix.clone().or_else(|| self.name.clone()).unwrap_or_else(|| "scenario".into())
    }

    /// Base scenario, or one per variant.
    pub fn scenarios(&self) -> CliResult<Vec<Scenario>> {
        if self.variants.is_empty() {
            let spec = self.run_spec(None, "")?;
            let grid = self.run.attempts.resolve("run.attempts")?;
            return Ok(vec![Scenario { name: self.label(), spec, grid }]);
        }
        let mut names = std::collections::BTreeSet::new();
        self.variants
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let path = format!("variant[{i}]");
                if !names.insert(v.name.clone()) {
                    return Err(CliError::schema(format!("{path}.name: duplicate variant name {:?}", v.name)));
                }
                let spec = self.run_spec(Some(v), &path)?;
                let grid = match &v.attempts {
                    Some(a) => a.resolve(&format!("{path}.attempts"))?,
                    None => self.run.attempts.resolve("run.attempts")?,
                };
                Ok(Scenario { name: v.name.clone(), spec, grid })
            })
            .collect()
    }

    fn run_spec(&self, v: Option<&Variant>, vpath: &str) -> CliResult<RunSpec> {
        let section = |name: &str, overridden: bool| if overridden { format!("{vpath}.{name}") } else { name.to_string() };
        let field_sec = v.and_then(|v| v.field.as_ref()).unwrap_or(&self.field);
        let field = field_params(field_sec, &section("field", v.is_some_and(|v| v.field.is_some())))?;
        let spin_path = section("spin", v.is_some_and(|v| v.spin.is_some()));
        let spin_sec = v
            .and_then(|v| v.spin.as_ref())
            .or(self.spin.as_ref())
            .ok_or_else(|| CliError::schema("spin: section is required for Monte-Carlo runs"))?;
        let spin = spin_params(spin_sec, &spin_path)?;
        let seq_path = section("sequence", v.is_some_and(|v| v.sequence.is_some()));
        let seq = sequence(v.and_then(|v| v.sequence.as_ref()).unwrap_or(&self.sequence));
        let noise_path = section("noise", v.is_some_and(|v| v.noise.is_some()));
        let noise = noise_model(v.and_then(|v| v.noise.as_ref()).unwrap_or(&self.noise));
        noise.validate().map_err(|e| CliError::at(&noise_path, e))?;
        seq.resolve(&spin, &field).map_err(|e| CliError::at(&seq_path, e))?;
        let spec = RunSpec {
            spin,
            field,
            seq,
            noise,
            n_attempts_grid: vec![1],
            n_trials: v.and_then(|v| v.trials).unwrap_or(self.run.trials),
            echo_count: v.and_then(|v| v.echoes).unwrap_or(self.run.echoes),
            master_seed: self.seed,
            initial_nuclear_state: self.run.initial_state,
            intrinsic_envelope: self.run.intrinsic_envelope,
        };
        let run_path = if vpath.is_empty() { "run".to_string() } else { vpath.to_string() };
        spec.validate().map_err(|e| CliError::at(&run_path, e))?;
        Ok(spec)
    }

    pub fn sweep_axes(&self) -> CliResult<Vec<Axis>> {
        let sweep = self.sweep.as_ref().ok_or_else(|| CliError::schema("sweep: section is required"))?;
        if sweep.axes.is_empty() {
            return Err(CliError::schema("sweep.axis: at least one axis is required"));
        }
        sweep.axes.iter().enumerate().map(|(i, a)| a.resolve(&format!("sweep.axis[{i}]"))).collect()
    }

    pub fn optical_model(&self) -> CliResult<OpticalLevelModel> {
        optical_model(self.optical.as_ref().unwrap_or(&OpticalSection::default()), "optical")
    }

    pub fn pump_probe(&self) -> CliResult<(PulseEnvelope, Vec<f64>, PumpProbeSection, StepControl)> {
        let pp = self.pumpprobe.clone().unwrap_or_default();
        let path = "pumpprobe";
        let shape = match pp.pulse {
            PulseKind::Gaussian => PulseShape::Gaussian { fwhm: pp.pulse_width.0 },
            PulseKind::Square => PulseShape::Square { duration: pp.pulse_width.0 },
        };
        let pump = PulseEnvelope { shape, peak_rabi: pp.peak_rabi.map(Freq::angular), center: 0.0 };
        pump.validate().map_err(|e| CliError::at(path, e))?;
        if pp.delay_points == 0 {
            return Err(CliError::schema(format!("{path}.delay_points: must be at least 1")));
        }
        if pp.delay_stop.0 < pp.delay_start.0 || pp.delay_start.0 < 0.0 {
            return Err(CliError::schema(format!("{path}.delay_stop: must be >= delay_start >= 0")));
        }
        let delays = if pp.delay_points == 1 {
            vec![pp.delay_start.0]
        } else {
            (0..pp.delay_points)
                .map(|k| pp.delay_start.0 + (pp.delay_stop.0 - pp.delay_start.0) * k as f64 / (pp.delay_points - 1) as f64)
                .collect()
        };
        let step = match (pp.max_rate_dt, pp.fixed_dt) {
            (Some(_), Some(_)) => {
                return Err(CliError::schema(format!("{path}: set at most one of max_rate_dt and fixed_dt")));
            }
            (Some(r), None) => StepControl::Adaptive { max_rate_dt: r },
            (None, Some(dt)) => StepControl::Fixed { dt: dt.0 },
            (None, None) => StepControl::default(),
        };
        Ok((pump, delays, pp, step))
    }
}

pub fn field_params(f: &FieldSection, path: &str) -> CliResult<FieldParams> {
    let built = match (f.strength, f.larmor) {
        (Some(_), Some(_)) => return Err(CliError::schema(format!("{path}: set only one of strength and larmor"))),
        (Some(b), None) => FieldParams::from_field(b.0, nvsim_core::physics::C13_GYROMAGNETIC_HZ_PER_GAUSS),
        (None, Some(l)) => FieldParams::from_larmor(l.angular()),
        (None, None) => Ok(FieldParams::reference_414g()),
    };
    built.map_err(|e| CliError::at(path, e))
}

pub fn spin_params(s: &SpinSection, path: &str) -> CliResult<NuclearSpinParams> {
    let preset = match &s.preset {
        Some(p) => Some(reference().spin(p).map_err(|_| {
            let known: Vec<&str> = reference().spins.iter().map(|s| s.label.as_str()).collect();
            CliError::schema(format!("{path}.preset: unknown spin {p:?} (known: {})", known.join(", ")))
        })?),
        None => None,
    };
    let label = s.label.clone().or_else(|| preset.map(|p| p.label.clone())).unwrap_or_else(|| "spin".into());
    let t2_star = s
        .t2_star
        .map(|t| t.0)
        .or_else(|| preset.map(|p| p.t2_star_ms * 1e-3))
        .ok_or_else(|| CliError::schema(format!("{path}.t2_star: required without a preset")))?;
    let mut spin = match (s.a_par, s.a_perp, s.delta_omega) {
        (Some(a), Some(b), None) => NuclearSpinParams::hyperfine(label, a.angular(), b.angular(), t2_star),
        (None, None, Some(dw)) => NuclearSpinParams::direct(label, dw.angular(), t2_star),
        (None, None, None) => match preset {
            Some(p) => NuclearSpinParams::direct(label, p.delta_omega(), t2_star),
            None => return Err(CliError::schema(format!("{path}: give delta_omega, a_par and a_perp, or a preset"))),
        },
        _ => return Err(CliError::schema(format!("{path}: give either delta_omega or both a_par and a_perp"))),
    }
    .map_err(|e| CliError::at(path, e))?;
    if let Some(t) = s.t2_hahn {
        spin = spin.with_t2_hahn(t.0).map_err(|e| CliError::at(&format!("{path}.t2_hahn"), e))?;
    }
    if s.exact_frequencies {
        spin = spin.strict();
    }
    Ok(spin)
}

pub fn sequence(s: &SequenceSection) -> AttemptSequence {
    let alpha = s.alpha.map_or(std::f64::consts::FRAC_PI_2, |a| a.0);
    let mut seq = match s.kind {
        SequenceKind::Standard => AttemptSequence { alpha, ..AttemptSequence::standard(s.delay.0) },
        SequenceKind::Shortened => AttemptSequence::shortened(alpha, s.delay.0),
    };
    if let Some(m) = s.middle_pi {
        seq.has_middle_pi = m;
    }
    if let Some(t) = s.post_repump_delay {
        seq.post_repump_delay = t.0;
    }
    if let Some(t) = s.repump_duration {
        seq.repump_duration = t.0;
    }
    match s.attempt_duration {
        Some(AttemptLength::Auto) => seq.attempt_duration = None,
        Some(AttemptLength::Fixed(t)) => seq.attempt_duration = Some(t.0),
        None => {}
    }
    seq.generic_alpha = s.generic_alpha;
    seq
}

pub fn noise_model(n: &NoiseSection) -> NoiseModel {
    NoiseModel {
        p_mw: n.p_mw,
        p_mw_alpha: n.p_mw_alpha,
        p_init: n.p_init,
        tau: n.tau.0,
        sigma_tau_qs: n.sigma_tau_qs.0,
        sigma_detuning_qs: n.sigma_detuning_qs.angular(),
        p_depol_per_attempt: n.p_depol_per_attempt,
    }
}

pub fn parse_branching(text: &str) -> Result<Branching, String> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected \"b0:b+:b-\", got {text:?}"));
    }
    let mut r = [0.0; 3];
    for (slot, p) in r.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| format!("invalid ratio entry {p:?}"))?;
    }
    Branching::from_ratio(r[0], r[1], r[2]).map_err(|e| e.to_string())
}

pub fn optical_model(o: &OpticalSection, path: &str) -> CliResult<OpticalLevelModel> {
    let mut m = OpticalLevelModel::reference();
    if let Some(t) = o.t_ex {
        m.t_ex = t.0;
    }
    if let Some(t) = o.t_e_prime {
        m.t_e_prime = t.0;
    }
    m.gamma_es = match o.isc_rate {
        Some(r) => r.angular(),
        None => isc_rate_from_lifetimes(m.t_ex, m.t_e_prime).map_err(|e| CliError::at(&format!("{path}.t_e_prime"), e))?,
    };
    if let Some(r) = o.isc_rate_ex {
        m.gamma_xs = r.angular();
    }
    if let Some(t) = o.t_s {
        m.t_s = t.0;
    }
    if let Some(b) = &o.branching {
        m.branching = parse_branching(b).map_err(|e| CliError::schema(format!("{path}.branching: {e}")))?;
    }
    if let Some(s) = o.strain_shift {
        m.strain_shift = s.angular();
    }
    m.validate().map_err(|e| CliError::at(path, e))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = "nvsim.scenario/1"
name = "t"
[spin]
preset = "C2"
[noise]
tau = "177ns"
[run]
trials = 10
attempts = { mode = "list", values = [10, 1, 100] }
"#;

    #[test]
    fn minimal_config_builds() {
        let cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        let sc = cfg.scenarios().unwrap();
        assert_eq!(sc.len(), 1);
        assert_eq!(sc[0].grid, GridChoice::Fixed(vec![1, 10, 100]));
        assert!((sc[0].spec.noise.tau - 177e-9).abs() < 1e-20);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let text = MINIMAL.replace("tau = \"177ns\"", "tau = \"177ns\"\ntua = 1");
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.message.contains("noise"), "{}", err.message);
    }

    #[test]
    fn bad_unit_reports_field_path() {
        let text = MINIMAL.replace("\"177ns\"", "\"177 parsecs\"");
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        assert!(err.message.starts_with("noise.tau"), "{}", err.message);
        let text = MINIMAL.replace("\"177ns\"", "177");
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        assert!(err.message.contains("no unit"), "{}", err.message);
    }

    #[test]
    fn wrong_schema_id_is_rejected() {
        let text = MINIMAL.replace("nvsim.scenario/1", "nvsim.scenario/0");
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        let again = ScenarioConfig::from_toml(&cfg.effective_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.scenarios().unwrap(), again.scenarios().unwrap());
        assert_eq!(cfg.digest(), again.digest());
    }

    #[test]
    fn delay_specs_parse() {
        assert_eq!(DelaySpec::parse("larmor").unwrap().0, Delay::LarmorPeriods { count: 1 });
        assert_eq!(DelaySpec::parse("phase_matched:2").unwrap().0, Delay::PhaseMatched { count: 2 });
        assert_eq!(DelaySpec::parse("225ns").unwrap().0, Delay::Seconds { value: 225e-9 });
        assert!(DelaySpec::parse("larmor:x").is_err());
    }

    #[test]
    fn branching_strings_parse() {
        let b = parse_branching("8:1:1").unwrap();
        assert!((b.b0 - 0.8).abs() < 1e-12);
        assert!(parse_branching("8:1").is_err());
    }
}
