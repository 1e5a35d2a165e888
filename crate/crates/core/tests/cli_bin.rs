//! Process-level checks of the `steinlab` binary: exit codes, the error
//! JSON contract, artefact determinism and subcommand/config agreement.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn steinlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steinlab"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn write_config(dir: &Path, value: &serde_json::Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn sde_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "experiment": "run-sde",
        "target": {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "kernel": {"family": "exp-power", "p": 2.0, "sigma": 1.0},
        "dynamics": {"mode": "sde-euler-maruyama", "dt": 0.02, "steps": 50, "seed": 5, "record_every": 5},
        "initial": {"kind": "grid", "n": 4, "dim": 1, "extent": 1.0},
        "diagnostics": {"ksd": true, "rate": true},
        "output": {"directory": out_dir, "formats": ["csv", "json"]}
    })
}

#[test]
fn run_ode_zero_steps_exits_zero_with_single_group() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = serde_json::json!({
        "experiment": "run-ode",
        "target": {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "kernel": {"family": "gaussian", "sigma": 1.0},
        "dynamics": {"mode": "ode-euler", "dt": 0.1, "steps": 0, "seed": 0, "record_every": 1},
        "initial": {"kind": "grid", "n": 3, "dim": 1, "extent": 1.0},
        "output": {"directory": out, "formats": ["csv", "json"]}
    });
    let path = write_config(dir.path(), &config);
    let result = steinlab(&["run-ode", "--config", &path]);
    assert!(result.status.success(), "{result:?}");
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3, "one row group expected");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn identical_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let path = write_config(dir.path(), &sde_config(&out_a));
    assert!(steinlab(&["run-sde", "--config", &path]).status.success());
    assert!(steinlab(&[
        "run-sde",
        "--config",
        &path,
        "--out",
        out_b.to_str().unwrap()
    ])
    .status
    .success());
    for name in ["trajectory.csv", "velocities.csv", "diagnostics.csv", "summary.json"] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical seeded runs");
    }
}

#[test]
fn seed_override_changes_the_draws() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let path = write_config(dir.path(), &sde_config(&out_a));
    assert!(steinlab(&["run-sde", "--config", &path]).status.success());
    assert!(steinlab(&[
        "run-sde",
        "--config",
        &path,
        "--out",
        out_b.to_str().unwrap(),
        "--seed",
        "99"
    ])
    .status
    .success());
    let a = fs::read(out_a.join("trajectory.csv")).unwrap();
    let b = fs::read(out_b.join("trajectory.csv")).unwrap();
    assert_ne!(a, b, "different seeds must change the trajectory");
}

#[test]
fn invalid_config_gives_exit_two_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = sde_config(&dir.path().join("out"));
    config["dynamics"]["dt"] = serde_json::json!(-1.0);
    let path = write_config(dir.path(), &config);
    let result = steinlab(&["run-sde", "--config", &path]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).expect("stderr must be JSON");
    assert_eq!(parsed["error"], "ConfigInvalid");
    assert!(parsed["message"].as_str().unwrap().contains("dt"));
}

#[test]
fn unknown_config_fields_are_a_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = sde_config(&dir.path().join("out"));
    config["surprise"] = serde_json::json!(1);
    let path = write_config(dir.path(), &config);
    let result = steinlab(&["run-sde", "--config", &path]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn subcommand_must_match_config_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &sde_config(&dir.path().join("out")));
    let result = steinlab(&["run-ode", "--config", &path]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("run-sde"), "should name the mismatch: {stderr}");
}

#[test]
fn validate_subcommand_lists_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = sde_config(&dir.path().join("out"));
    // p < 2 with a v-stat KSD request and the default (erroring) diagonal
    // convention must produce exactly one diagnostic naming the issue
    config["kernel"] = serde_json::json!({"family": "exp-power", "p": 1.0, "sigma": 1.0});
    let path = write_config(dir.path(), &config);
    let result = steinlab(&["validate", "--config", &path]);
    assert_eq!(result.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert_eq!(stdout.lines().count(), 1, "one diagnostic expected: {stdout}");
    assert!(stdout.contains("diagonal"));

    let good = write_config(dir.path(), &sde_config(&dir.path().join("out2")));
    let result = steinlab(&["validate", "--config", &good]);
    assert!(result.status.success());
    assert!(String::from_utf8_lossy(&result.stdout).contains("valid"));
}

#[test]
fn missing_config_file_is_io_error() {
    let result = steinlab(&["run-ode", "--config", "/nonexistent/config.json"]);
    assert_eq!(result.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&result.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(parsed["error"], "IoError");
}

#[test]
fn continuum_identities_writes_grid_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = serde_json::json!({
        "experiment": "continuum-identities",
        "target": {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "kernel": {"family": "gaussian", "sigma": 1.0},
        "continuum": {
            "path": {"mean_poly": [0.8, -0.8], "std_poly": [1.2, -0.2], "horizon": 1.0},
            "timesteps": 8,
            "grid_size": 129
        },
        "output": {"directory": out, "formats": ["csv", "json"]}
    });
    let path = write_config(dir.path(), &config);
    let result = steinlab(&["continuum-identities", "--config", &path]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let csv = fs::read_to_string(out.join("grid_diagnostics.csv")).unwrap();
    assert!(csv.starts_with("t,kl,stein_fisher,tangent_norm2,ede_running\n"));
    assert_eq!(csv.lines().count(), 1 + 9);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["ede_residual"].as_f64().unwrap() >= -1e-4);
    assert!(summary["fisher_forms_gap_rel"].as_f64().unwrap() < 1e-5);
}

#[test]
fn compare_experiment_writes_report_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = serde_json::json!({
        "experiment": "compare",
        "target": {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "kernels": [
            {"family": "exp-power", "p": 1.0, "sigma": 1.0},
            {"family": "exp-power", "p": 2.0, "sigma": 1.0}
        ],
        "compare": {"sweep_count": 4},
        "output": {"directory": out, "formats": ["csv", "json"]}
    });
    let path = write_config(dir.path(), &config);
    let result = steinlab(&["compare", "--config", &path]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out.join("comparison_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["ksd_sweep"].as_array().unwrap().len(), 4);
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("measure_id,ksd_a,ksd_b,diff_sign\n"));
}
