//! End-to-end checks of the command-line interface: exit codes, output
//! files, the zero-horizon edge case, and the ledger round trip through
//! the `bounds` subcommand.

use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_chemokin");

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("scenarios")
        .join(name)
}

const TINY: &str = r#"
[model]
t_e = 1.0
t_a = 4.0
g = saturating [1.0] [1.0]
lambda = saturating 1.0 -0.5
kernel = uniform
speeds = [-1.0, 1.0]
weights = [1.0, 1.0]
d = [1.0]
k = [1.0]
k0 = [1.0]
reaction = produce_degrade
length = 20.0
nx = 32
ny1 = 32
ny2 = 32

[growth]
phi = saturating_linear 1.0 1.0
psi = constant 1.2
lambda_fn = constant 0.0
pi = constant 0.0
omega = 1.0
sigma = 1.0
gamma = 1.0
c_y = 9.0
c_poly = 1.5
c_lambda = 1.5
c_div = 1.3
s_max = 5.0
dcdt_max = 10.0

[scenario]
mode = kinetic
signal = elliptic
horizon = 0.4
dt = 0.1
output_every = 2
seed = 9
workers = 1

[initial]
mass = 1.0
x_profile = gaussian 10.0 1.0
v_weights = [0.5, 0.5]
y_center = [0.0, 0.3]
y_sigma = [0.35, 0.35]
y_support = [1.4, 1.4]
s0 = elliptic
"#;

#[test]
fn validate_reports_regimes_for_the_shipped_scenario() {
    let out = Command::new(BIN)
        .args(["validate"])
        .arg(scenario_path("standard.cfg"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("bounded-rate"), "{text}");
    assert!(text.contains("[pass] lambda-bounded"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, TINY.replace("kernel = uniform", "kernel = tabulated [0.4, 0.4, 0.4, 0.4]")).unwrap();
    let out = Command::new(BIN).args(["validate"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("KERNEL_NORMALIZATION"), "{text}");
}

#[test]
fn run_writes_the_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(BIN)
        .args(["run"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["moments.csv", "ledger.csv", "summary.txt", "signal_000000.csv"] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }
    // At least two field snapshots (initial and final).
    let snapshots = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("field_")
        })
        .count();
    assert!(snapshots >= 2, "{snapshots} snapshots");
    // Config hash declared in every CSV header.
    let moments = std::fs::read_to_string(out_dir.join("moments.csv")).unwrap();
    assert!(moments.starts_with("# config_sha256 = "));
}

#[test]
fn zero_horizon_gives_exactly_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t0.cfg");
    std::fs::write(&cfg, TINY.replace("horizon = 0.4", "horizon = 0.0")).unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(BIN)
        .args(["run"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let moments = std::fs::read_to_string(out_dir.join("moments.csv")).unwrap();
    let data_rows = moments
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('t') && !l.trim().is_empty())
        .count();
    assert_eq!(data_rows, 1);
}

#[test]
fn bounds_subcommand_reproduces_the_run_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    assert!(Command::new(BIN)
        .args(["run"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run_dir)
        .status()
        .unwrap()
        .success());
    let bounds_dir = dir.path().join("bounds");
    assert!(Command::new(BIN)
        .args(["bounds"])
        .arg(&cfg)
        .arg("--series")
        .arg(run_dir.join("moments.csv"))
        .arg("--out")
        .arg(&bounds_dir)
        .status()
        .unwrap()
        .success());
    let from_run = std::fs::read(run_dir.join("ledger.csv")).unwrap();
    let from_bounds = std::fs::read(bounds_dir.join("ledger.csv")).unwrap();
    assert_eq!(
        from_run, from_bounds,
        "ledger must be reproducible from the config and the recorded series"
    );
}

#[test]
fn trace_subcommand_writes_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("trace.csv");
    let status = Command::new(BIN)
        .args(["trace"])
        .arg(&cfg)
        .args(["--x", "10.0", "--v", "1.0", "--t", "1.0", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().count() > 8);
    assert!(text.contains("jac_det"));
}
