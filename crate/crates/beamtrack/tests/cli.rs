//! End-to-end checks of the command-line surface: subcommands, output files,
//! and exit codes (0 success, 2 config error, 3 infeasible optimization).

use std::path::Path;
use std::process::Command;

fn beamtrack() -> Command {
    Command::new(env!("CARGO_BIN_EXE_beamtrack"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn run_writes_the_bundle_and_reports_per_radius() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        r#"
antennas = "narrow"
error_radii_m = [0.0, 10.0]
trials = 3

[controller]
kind = "skeleton-tracking"
distance_threshold = 0.98
"#,
    );
    let out = dir.path().join("results");
    let status = beamtrack()
        .args(["run", "--seed", "5"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{status:?}");
    for name in [
        "rates_per_grid.csv",
        "rate_distribution.csv",
        "updates_table.csv",
        "manifest.json",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("r=  0.0 m"), "{stdout}");
    assert!(stdout.contains("r= 10.0 m"), "{stdout}");
}

#[test]
fn run_is_reproducible_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        r#"
antennas = "wide"
error_radii_m = [5.0]
trials = 2

[controller]
kind = "per-grid"
"#,
    );
    let mut outputs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let status = beamtrack()
            .args(["run", "--seed", "11"])
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success());
        outputs.push(std::fs::read_to_string(out.join("rates_per_grid.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        r#"
antennas = "narrow"
trials = 0

[controller]
kind = "per-grid"
"#,
    );
    let status = beamtrack()
        .args(["run", "--seed", "1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn infeasible_radius_search_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    // An unreachable per-grid rate floor makes every candidate infeasible.
    write(
        &cfg,
        r#"
antennas = "narrow"
error_radii_m = [0.0, 5.0]
trials = 2
rate_threshold_bps = 1e15

[controller]
kind = "skeleton-tracking"
distance_threshold = 0.98
"#,
    );
    let status = beamtrack()
        .args(["tune-r", "--seed", "2", "--threshold", "0.98"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn tune_td_writes_the_probe_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        r#"
antennas = "narrow"
trials = 5
u_max = 20

[controller]
kind = "skeleton-tracking"
distance_threshold = 0.98
"#,
    );
    let out = dir.path().join("tune");
    let output = beamtrack()
        .args(["tune-td", "--seed", "3", "--tol", "0.05"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let trace = std::fs::read_to_string(out.join("optimizer_trace.csv")).unwrap();
    assert!(trace.starts_with("param,objective,violation_prob,stderr,feasible"));
    assert!(trace.lines().count() > 4);
    assert!(out.join("grid_scan.csv").exists());
    assert!(String::from_utf8_lossy(&output.stdout).contains("T_D* ="));
}

#[test]
fn trace_scenario_dumps_paths_and_skeletons() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace");
    let status = beamtrack()
        .args(["trace-scenario", "--grid", "7"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let db_text = std::fs::read_to_string(out.join("skeleton_db.json")).unwrap();
    let db = beamtrack::skeleton::SkeletonDatabase::import_json(&db_text).unwrap();
    assert_eq!(db.len(), 50);
    let paths = std::fs::read_to_string(out.join("scenario_paths.csv")).unwrap();
    assert!(paths.lines().count() > 1);
    assert!(paths.lines().skip(1).all(|l| l.starts_with("7,")));
}

#[test]
fn bench_overrides_the_controller() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        r#"
antennas = "narrow"
error_radii_m = [0.0]
trials = 3

[controller]
kind = "skeleton-tracking"
distance_threshold = 0.98
"#,
    );
    let out = dir.path().join("bench");
    let output = beamtrack()
        .args([
            "bench",
            "--seed",
            "4",
            "--kind",
            "fixed-distance",
            "--distance",
            "7",
        ])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let updates = std::fs::read_to_string(out.join("updates_table.csv")).unwrap();
    // 150 m walk with 7 m refresh marks: 22 queries per trial.
    let first_row = updates.lines().nth(1).unwrap();
    let mean_u: f64 = first_row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(mean_u, 22.0);
}
