use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nvsim_cli::config::ScenarioConfig;

const SMALL: &str = r#"
schema = "nvsim.scenario/1"
name = "small"
seed = 7

[spin]
preset = "C1"

[sequence]
kind = "standard"
delay = "larmor:1"

[noise]
tau = "52ns"

[run]
trials = 400
intrinsic_envelope = false
attempts = { mode = "linear", stop = 800, points = 12 }
"#;

fn nvsim(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nvsim"));
    cmd.arg("--out-dir").arg(dir.join("out")).args(args).env_remove("NVSIM_BUDGET");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn predict_blok_matches_c1_echo_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nvsim(tmp.path(), &["predict", "--model", "blok", "--spin", "C1", "--tau", "52ns", "--attempts", "800"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("N_1/e = 264.8"), "{}", stdout(&o));
    assert!(tmp.path().join("out/predict_blok.csv").exists());
}

#[test]
fn simulate_writes_csv_summary_and_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("out/small.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "n,coherence,std_err,sigma_x,sigma_y,seed,config_digest");
    assert_eq!(lines.count(), 12);
    let effective = fs::read_to_string(tmp.path().join("out/small_effective.toml")).unwrap();
    let reparsed = ScenarioConfig::from_toml(&effective).unwrap();
    assert_eq!(reparsed.effective_toml(), effective);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/small_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_digest"].as_str().unwrap(), reparsed.digest());
}

#[test]
fn seed_and_trial_overrides_enter_the_digest() {
    let cfg = ScenarioConfig::from_toml(SMALL).unwrap();
    let mut other = cfg.clone();
    other.apply(&nvsim_cli::config::Overrides { seed: Some(8), trials: None });
    assert_ne!(cfg.digest(), other.digest());
    assert!(other.effective_toml().contains("seed = 8"));
}

#[test]
fn bare_number_is_a_schema_error_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace(r#"tau = "52ns""#, "tau = 52"));
    let o = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("noise.tau"), "{err}");
    assert!(err.contains("no unit"), "{err}");
}

#[test]
fn wrong_unit_is_a_schema_error_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace(r#"tau = "52ns""#, r#"tau = "52kHz""#));
    let o = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("noise.tau"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("[noise]", "[noise]\nspeed = 3"));
    let o = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("speed"), "{}", stderr(&o));
}

#[test]
fn budget_is_enforced_before_work_starts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[("NVSIM_BUDGET", "1e4")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!tmp.path().join("out/small.csv").exists());
    let ok = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[("NVSIM_BUDGET", "320000")]);
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn malformed_budget_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[("NVSIM_BUDGET", "lots")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_fit_warns_or_exits_under_strict() {
    let tmp = tempfile::tempdir().unwrap();
    let short = SMALL.replace(
        r#"attempts = { mode = "linear", stop = 800, points = 12 }"#,
        r#"attempts = { mode = "list", values = [100, 200, 300] }"#,
    );
    let cfg = write_config(tmp.path(), &short);
    let lenient = nvsim(tmp.path(), &["--config", &cfg, "simulate"], &[]);
    assert!(lenient.status.success());
    assert!(stderr(&lenient).contains("warning"), "{}", stderr(&lenient));
    let strict = nvsim(tmp.path(), &["--strict", "--config", &cfg, "simulate"], &[]);
    assert_eq!(strict.status.code(), Some(4), "{}", stderr(&strict));
}

#[test]
fn fit_command_reads_simulated_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    assert!(nvsim(tmp.path(), &["--trials", "4000", "--config", &cfg, "simulate"], &[]).status.success());
    let csv = tmp.path().join("out/small.csv").display().to_string();
    let o = nvsim(tmp.path(), &["fit", "--input", &csv, "--form", "stretched"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/small_fit.json")).unwrap()).unwrap();
    let n = fit["parameters"].as_array().unwrap().iter().find(|p| p["name"] == "n_1e").unwrap()["value"].as_f64().unwrap();
    assert!((200.0..330.0).contains(&n), "{n}");
}

#[test]
fn unknown_figure_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nvsim(tmp.path(), &["reproduce", "fig9"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fig1d"));
}

#[test]
fn bundled_configs_parse() {
    for fig in nvsim_cli::reproduce::FIGURES {
        let cfg = nvsim_cli::reproduce::bundled_config(fig, &Default::default()).unwrap();
        if cfg.optical.is_none() {
            assert!(!cfg.scenarios().unwrap().is_empty(), "{fig}");
        }
    }
}

#[test]
fn thread_count_does_not_change_csv_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let dir = tmp.path().join(threads);
        let o = Command::new(env!("CARGO_BIN_EXE_nvsim"))
            .args(["--quiet", "--threads", threads, "--config", &cfg, "--out-dir"])
            .arg(&dir)
            .arg("simulate")
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push(fs::read(dir.join("small.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn reference_prints_bundled_set() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nvsim(tmp.path(), &["reference"], &[]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["spins"].as_array().unwrap().len(), 7);
}
