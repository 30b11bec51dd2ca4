use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svpic::io::{read_ledger_csv, read_snapshot, Manifest};

fn svpic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svpic"))
        .args(args)
        .env_remove("SVPIC_OUT")
        .env_remove("SVPIC_THREADS")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const LB: &str = r#"
seed = 4
n_particles = 300

[initial]
drift = [1.0, 0.0, 0.0]

[collision]
kind = "lenard_bernstein"

[integrator]
dt = 0.01
n_steps = 40

[output]
diagnostics_stride = 10
snapshot_stride = 20
"#;

#[test]
fn run_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "lb.toml", LB);
    let out = dir.path().join("out");
    let o = svpic(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 40);
    assert_eq!(summary["seed"], 4);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let manifest: Manifest = serde_json::from_value(manifest).unwrap();
    assert_eq!(manifest.seed, 4);
    assert!(manifest.wall_clock.is_some());
    for entry in &manifest.files {
        assert!(out.join(&entry.path).exists(), "{entry:?}");
    }

    let rows = read_ledger_csv(&out.join("diagnostics.csv")).unwrap();
    let times: Vec<f64> = rows.iter().map(|r| (r.t * 100.0).round()).collect();
    assert_eq!(times, vec![0.0, 10.0, 20.0, 30.0, 40.0]);

    let (ens, meta) = read_snapshot(&out.join("snapshot_0000000040.svpm")).unwrap();
    assert_eq!(ens.len(), 300);
    assert_eq!(meta.step, 40);
    assert!(out.join("snapshot_0000000020.svpm").exists());

    let inspect = svpic(&["inspect", out.join("snapshot_0000000020.svpm").to_str().unwrap()]);
    assert!(inspect.status.success());
    let report: serde_json::Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(report["meta"]["step"], 20);
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "lb.toml", LB);
    let mut summaries = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = dir.path().join(name);
        let o = svpic(&[
            "--threads",
            threads,
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        summaries.push((
            fs::read(out.join("summary.json")).unwrap(),
            fs::read(out.join("diagnostics.csv")).unwrap(),
        ));
    }
    assert_eq!(summaries[0], summaries[1]);
    assert_eq!(summaries[0], summaries[2]);
}

#[test]
fn overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "lb.toml", LB);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_svpic"))
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "--steps",
            "5",
            "--dt",
            "0.02",
            "--scheme",
            "stratonovich_heun",
        ])
        .env("SVPIC_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["steps"], 5);
    assert!((summary["t_final"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "bad.toml",
        r#"
n_particles = 10
[collision]
kind = "lenard_bernstein"
nu = -1.0
[integrator]
scheme = "ito_eulr"
dt = 0.1
n_steps = 3
horizon = 0.3
[output]
diagnostics_strid = 2
"#,
    );
    let o = svpic(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nu must be positive"), "{err}");
    assert!(err.contains("did you mean \"ito_euler\""), "{err}");
    assert!(err.contains("diagnostics_stride"), "{err}");
    assert!(err.contains("n_steps"), "{err}");
}

#[test]
fn incompatible_scheme_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "lb.toml", LB);
    let o = svpic(&["run", "--config", cfg.to_str().unwrap(), "--scheme", "lorentz_rotation"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("integrator.scheme") && err.contains("collision.kind"),
        "{err}"
    );
}

#[test]
fn numerical_blow_up_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "coulomb.toml",
        r#"
seed = 1
n_particles = 20
[collision]
kind = "coulomb"
gamma = 1.0
[integrator]
dt = 1e200
n_steps = 5
"#,
    );
    let o = svpic(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("particle"));
}

#[test]
fn missing_config_file_fails() {
    let o = svpic(&["run", "--config", "/nonexistent/svpic.toml"]);
    assert!(!o.status.success());
}

#[test]
fn verify_prints_json_lines() {
    let o = svpic(&["verify", "fields", "--scale", "0.1", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l["suite"] == "fields" && l["pass"] == true));
    let again = svpic(&["verify", "fields", "--scale", "0.1", "--seed", "2"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn convergence_reports_an_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "lb.toml",
        r#"
seed = 3
n_particles = 2000
[initial]
drift = [1.0, 0.0, 0.0]
[collision]
kind = "lenard_bernstein"
[integrator]
dt = 0.1
n_steps = 10
"#,
    );
    let o = svpic(&["convergence", "--config", cfg.to_str().unwrap(), "--levels", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["levels"].as_array().unwrap().len(), 4);
    let order = report["fitted_order"].as_f64().unwrap();
    assert!((order - 1.0).abs() < 0.3, "{order}");

    let o = svpic(&["convergence", "--config", cfg.to_str().unwrap(), "--levels", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
