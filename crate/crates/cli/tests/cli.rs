use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY_GRID: &str = "[grid]\nj_min = -1\nradial_per_octave = 4\nangular_count = 64\nspatial_l = 2.0\nlattice_n = 8\n[dyadic]\nj_max = 1\n";

fn run(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_parafio"))
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn summary(dir: &Path, command: &str) -> Value {
    let text = fs::read_to_string(dir.join("out").join(format!("{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn delta_below_sqrt_epsilon_is_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "command = \"norm\"\n[phase]\nkind = \"perturbed\"\nepsilon = 0.25\n[dyadic]\ndelta = 0.5\n";
    let o = run(dir.path(), cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 6"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_config_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "command = \"norm\"\n[grid]\nlattice_n = \"many\"\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn unknown_command_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "command = \"plot\"\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn flat_phase_passes_every_assumption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("command = \"check-assumptions\"\n[phase]\nkind = \"flat\"\n{TINY_GRID}");
    let o = run(dir.path(), &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(dir.path(), "check-assumptions");
    assert_eq!(s["pass"], Value::Bool(true));
    assert_eq!(s["metrics"]["failed"].as_array().unwrap().len(), 0);
    let csv = fs::read_to_string(dir.path().join("out/check-assumptions.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn flat_roundtrip_on_the_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "command = \"flat-roundtrip\"\n[phase]\nkind = \"flat\"\n", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(dir.path(), "flat-roundtrip");
    let err = s["metrics"]["relative_error"].as_f64().unwrap();
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn summaries_echo_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("command = \"check-assumptions\"\n[phase]\nkind = \"flat\"\n{TINY_GRID}");
    run(dir.path(), &cfg, &["--seed", "17"]);
    let c = &summary(dir.path(), "check-assumptions")["config"];
    assert_eq!(c["seed"], 17);
    assert_eq!(c["phase"]["epsilon"], 0.0);
    assert_eq!(c["phase"]["preset"], "default");
    assert_eq!(c["dyadic"]["delta"], 0.5);
    assert_eq!(c["dyadic"]["alpha"], 0.125);
    assert_eq!(c["params"]["angle_octave"], 1);
    assert!(c["params"]["mu"].as_f64().unwrap() > 0.0);
}

#[test]
fn positional_command_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("command = \"solve\"\n[phase]\nkind = \"flat\"\n{TINY_GRID}");
    let o = run(dir.path(), &cfg, &["check-assumptions"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("out/check-assumptions.json").exists());
    assert!(!dir.path().join("out/solve.json").exists());
}

#[test]
fn identical_seed_gives_identical_reports() {
    let cfg = format!("command = \"norm\"\n[params]\nensemble_size = 2\npower_iters = 5\n{TINY_GRID}");
    let dir = tempfile::tempdir().unwrap();
    let read = |seed: &str| {
        let o = run(dir.path(), &cfg, &["--seed", seed]);
        assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", stderr(&o));
        let out = dir.path().join("out");
        (fs::read(out.join("norm.csv")).unwrap(), fs::read(out.join("norm.json")).unwrap())
    };
    let a = read("5");
    let b = read("5");
    assert_eq!(a, b);
    let c = read("6");
    assert_ne!(a.0, c.0);
}

#[test]
fn smoke_suite_runs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")).unwrap();
    let o = run(dir.path(), &cfg, &[]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", stderr(&o));
    let steps = summary(dir.path(), "suite")["steps"].as_array().unwrap().clone();
    assert_eq!(steps.len(), 11);
    for step in steps {
        let name = step["command"].as_str().unwrap();
        assert!(dir.path().join("out").join(format!("{name}.csv")).exists(), "{name}");
        assert_eq!(summary(dir.path(), name)["pass"], step["pass"]);
    }
}
