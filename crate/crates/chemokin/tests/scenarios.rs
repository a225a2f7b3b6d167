//! Smoke coverage for the shipped scenarios that the acceptance criteria
//! do not already drive end to end.

use std::path::{Path, PathBuf};

use chemokin::config::load_config;
use chemokin::runner::run_scenario;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("scenarios")
        .join(name)
}

#[test]
fn parabolic_scenario_runs_clean() {
    let loaded = load_config(&scenario_path("parabolic.cfg")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_scenario(&loaded, dir.path()).unwrap();
    assert!(summary.mass_drift < 1e-10);
    assert_eq!(summary.violations, 0);
    let ledger = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    // Parabolic runs monitor the Jacobian and the sup/gradient signal
    // bounds; the temporal-derivative estimate is elliptic-only.
    assert!(ledger.contains("jacobian-inverse-log"));
    assert!(ledger.contains("signal-dx[0]"));
    assert!(!ledger.contains("signal-dt[0]"));
}

#[test]
fn twoway_scenario_runs_and_dumps_trajectories() {
    let loaded = load_config(&scenario_path("twoway.cfg")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_scenario(&loaded, dir.path()).unwrap();
    assert_eq!(summary.violations, 0);
    let traj = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    let rows: Vec<&str> = traj
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("agent"))
        .collect();
    // 5 dumped agents over 50 steps.
    assert_eq!(rows.len(), 5 * 50);
    // Some reorientation events must have fired at these rates.
    assert!(rows.iter().any(|r| r.ends_with(",1")));
    // Dumped agents follow the same streams as the plain stepper: the
    // run is reproducible.
    let dir2 = tempfile::tempdir().unwrap();
    run_scenario(&loaded, dir2.path()).unwrap();
    let traj2 = std::fs::read_to_string(dir2.path().join("trajectories.csv")).unwrap();
    assert_eq!(traj, traj2);
}
