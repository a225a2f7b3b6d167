//! Exercises the C ABI end to end: handle lifecycle, error codes, a tiny
//! run through the opaque handle, and the direct elliptic entry point.

use std::ffi::CString;
use std::os::raw::c_char;

use chemokin_ffi::{
    chemokin_last_error, chemokin_run, chemokin_scenario_free, chemokin_scenario_load,
    chemokin_solve_elliptic, chemokin_validation_report, chemokin_version, ChemokinRunSummary,
    ChemokinScenario, CHEMOKIN_ERR_CONFIG, CHEMOKIN_ERR_NULL, CHEMOKIN_OK,
};

const TINY_SCENARIO: &str = r#"
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
horizon = 0.2
dt = 0.1
output_every = 1
seed = 5
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

fn last_error() -> String {
    let needed = chemokin_last_error(std::ptr::null_mut(), 0);
    let mut buf = vec![0u8; needed + 1];
    chemokin_last_error(buf.as_mut_ptr() as *mut c_char, buf.len());
    String::from_utf8_lossy(&buf[..needed]).to_string()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { std::ffi::CStr::from_ptr(chemokin_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn load_run_and_free_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(&cfg_path, TINY_SCENARIO).unwrap();
    let c_cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();

    let mut handle: *mut ChemokinScenario = std::ptr::null_mut();
    let code = chemokin_scenario_load(c_cfg.as_ptr(), &mut handle);
    assert_eq!(code, CHEMOKIN_OK, "{}", last_error());
    assert!(!handle.is_null());

    // Validation report renders.
    let needed = chemokin_validation_report(handle, std::ptr::null_mut(), 0);
    assert!(needed > 0);
    let mut buf = vec![0u8; needed + 1];
    chemokin_validation_report(handle, buf.as_mut_ptr() as *mut c_char, buf.len());
    let report = String::from_utf8_lossy(&buf[..needed]).to_string();
    assert!(report.contains("lambda_max"));

    let out_dir = dir.path().join("out");
    let c_out = CString::new(out_dir.to_str().unwrap()).unwrap();
    let mut summary = ChemokinRunSummary {
        steps: 0,
        recorded_rows: 0,
        final_mass: 0.0,
        mass_drift: 0.0,
        violations: 0,
        max_l1_distance: 0.0,
        wall_seconds: 0.0,
    };
    let code = chemokin_run(handle, c_out.as_ptr(), &mut summary);
    assert_eq!(code, CHEMOKIN_OK, "{}", last_error());
    assert_eq!(summary.steps, 2);
    assert!((summary.final_mass - 1.0).abs() < 1e-10);
    assert!(summary.violations == 0);
    assert!(summary.max_l1_distance.is_nan());
    assert!(out_dir.join("moments.csv").exists());
    assert!(out_dir.join("ledger.csv").exists());

    chemokin_scenario_free(handle);
}

#[test]
fn config_errors_are_reported_with_code_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, TINY_SCENARIO.replace("k0 = [1.0]", "k0 = [-2.0]")).unwrap();
    let c_cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let mut handle: *mut ChemokinScenario = std::ptr::null_mut();
    let code = chemokin_scenario_load(c_cfg.as_ptr(), &mut handle);
    assert_eq!(code, CHEMOKIN_ERR_CONFIG);
    assert!(handle.is_null());
    assert!(last_error().contains("POSITIVITY"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle: *mut ChemokinScenario = std::ptr::null_mut();
    assert_eq!(
        chemokin_scenario_load(std::ptr::null(), &mut handle),
        CHEMOKIN_ERR_NULL
    );
    assert_eq!(
        chemokin_solve_elliptic(
            std::ptr::null(),
            8,
            1.0,
            1.0,
            1.0,
            1.0,
            std::ptr::null_mut(),
            std::ptr::null_mut()
        ),
        CHEMOKIN_ERR_NULL
    );
}

#[test]
fn elliptic_entry_matches_uniform_steady_state() {
    let n = vec![0.5f64; 64];
    let mut s = vec![0.0f64; 64];
    let mut dx = vec![0.0f64; 64];
    let code = chemokin_solve_elliptic(
        n.as_ptr(),
        n.len(),
        10.0,
        2.0,
        3.0,
        1.5,
        s.as_mut_ptr(),
        dx.as_mut_ptr(),
    );
    assert_eq!(code, CHEMOKIN_OK);
    for (sv, dv) in s.iter().zip(&dx) {
        assert!((sv - 3.0 * 0.5 / 1.5).abs() < 1e-12);
        assert!(dv.abs() < 1e-12);
    }
}
