//! End-to-end tests of the `orlat` binary: output layout, reproducibility,
//! and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn orlat() -> Command {
    Command::new(env!("CARGO_BIN_EXE_orlat"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = orlat().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "orlat {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Identical config and seed produce byte-identical CSV artifacts and the
/// same manifest up to the timing block.
#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "branching.toml",
        r#"
process = "branching"
weights = { segments = [[0.25, 1.25, 1.0]] }
lambdas = [2.0, 3.0]
ds = [4]
n_runs = 300
horizon = 60
pop_cap = 2000
master_seed = 17
"#,
    );
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    for dir in [&dir_a, &dir_b] {
        run_ok(&[
            "branching",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--log",
        ]);
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&dir_a, "results.csv"), read(&dir_b, "results.csv"));
    assert_eq!(read(&dir_a, "replicas.csv"), read(&dir_b, "replicas.csv"));
    let manifest = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&read(d, "manifest.json")).unwrap();
        v.as_object_mut().unwrap().remove("excluded");
        v
    };
    assert_eq!(manifest(&dir_a), manifest(&dir_b));
}

/// A different seed changes the Monte Carlo results.
#[test]
fn the_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "sir.toml",
        r#"
process = "sir"
weights = { atoms = [[1.0, 1.0]] }
lambdas = [2.0]
ds = [5]
n_runs = 400
horizon = 40
pop_cap = 2000
"#,
    );
    let dir_a = tmp.path().join("s0");
    let dir_b = tmp.path().join("s1");
    run_ok(&[
        "sir",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir_a.to_str().unwrap(),
    ]);
    run_ok(&[
        "sir",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir_b.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_ne!(
        fs::read(dir_a.join("results.csv")).unwrap(),
        fs::read(dir_b.join("results.csv")).unwrap()
    );
}

/// stdout carries a JSON run summary whose rows match the CSV on disk.
#[test]
fn stdout_summary_is_json_and_matches_the_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "theta.toml",
        r#"
process = "theta"
weights = { segments = [[0.0, 1.0, 1.0]] }
lambdas = [4.0, 5.0]
"#,
    );
    let dir = tmp.path().join("out");
    let out = run_ok(&[
        "theta",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["process"], "theta");
    assert_eq!(summary["cells"], 2);
    assert_eq!(summary["summaries"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(dir.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "d,lambda,point,ci_lo,ci_hi,censored,limit_survival,abs_gap"
    );
    assert_eq!(lines.count(), 2);
}

/// Subcommand and config must agree on the process; disagreement is a usage
/// error (exit code 2) before any work happens.
#[test]
fn process_mismatch_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "theta.toml",
        r#"
process = "theta"
weights = { atoms = [[1.0, 1.0]] }
lambdas = [2.0]
"#,
    );
    let out = orlat()
        .args(["sir", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

/// Unknown config keys and malformed TOML are usage errors too.
#[test]
fn malformed_configs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = write_config(
        tmp.path(),
        "bad_key.toml",
        r#"
process = "theta"
weights = { atoms = [[1.0, 1.0]] }
lambdas = [2.0]
replicas = 10
"#,
    );
    let out = orlat()
        .args(["theta", "--config", bad_key.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let not_toml = write_config(tmp.path(), "broken.toml", "process = [unterminated");
    let out = orlat()
        .args(["theta", "--config", not_toml.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

/// A cell that cannot be computed is a runtime failure: exit code 3 and a
/// FAILED.txt marker beside the partial results.
#[test]
fn runtime_failures_leave_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "subcritical.toml",
        r#"
process = "theta"
weights = { atoms = [[1.0, 1.0]] }
lambdas = [2.0, 0.5]
"#,
    );
    let dir = tmp.path().join("out");
    let out = orlat()
        .args([
            "theta",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.join("FAILED.txt").exists());
    assert!(!dir.join("manifest.json").exists());
    // The first (supercritical) cell was still flushed.
    let csv = fs::read_to_string(dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "header plus the completed cell");
}

/// The quenched flag pins the environment: reruns agree, and the flag is
/// rejected for processes without an environment.
#[test]
fn quenched_flag_pins_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "contact.toml",
        r#"
process = "contact"
weights = { segments = [[0.5, 1.5, 1.0]] }
lambdas = [1.5]
ds = [5]
n_runs = 200
t_max = 30.0
pop_cap = 1000
"#,
    );
    let dir_a = tmp.path().join("qa");
    let dir_b = tmp.path().join("qb");
    for dir in [&dir_a, &dir_b] {
        run_ok(&[
            "contact",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--quenched",
            "31",
        ]);
    }
    assert_eq!(
        fs::read(dir_a.join("results.csv")).unwrap(),
        fs::read(dir_b.join("results.csv")).unwrap()
    );

    let theta = write_config(
        tmp.path(),
        "theta.toml",
        r#"
process = "theta"
weights = { atoms = [[1.0, 1.0]] }
lambdas = [2.0]
"#,
    );
    let out = orlat()
        .args([
            "theta",
            "--config",
            theta.to_str().unwrap(),
            "--quenched",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
