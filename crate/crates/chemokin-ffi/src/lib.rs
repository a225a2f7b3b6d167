//! C ABI for the chemokin simulator.
//!
//! Scenario handles are opaque; every call returns an error code and the
//! last error message is retrievable per thread. The generated header
//! lives in `include/chemokin.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;
use std::ptr;

use chemokin::config::{load_config, LoadedScenario};
use chemokin::grid::XGrid;
use chemokin::runner::{render_validation, run_scenario};
use chemokin::signal::{solve_elliptic, SpectralOp};

/// Call succeeded.
pub const CHEMOKIN_OK: i32 = 0;
/// The configuration was rejected; see `chemokin_last_error`.
pub const CHEMOKIN_ERR_CONFIG: i32 = 2;
/// The run failed at runtime; see `chemokin_last_error`.
pub const CHEMOKIN_ERR_RUNTIME: i32 = 3;
/// A required pointer argument was null.
pub const CHEMOKIN_ERR_NULL: i32 = 4;
/// A string argument was not valid UTF-8.
pub const CHEMOKIN_ERR_UTF8: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message.into());
}

/// Opaque, fully validated scenario.
pub struct ChemokinScenario {
    inner: LoadedScenario,
}

/// Aggregate results of a completed run.
#[repr(C)]
pub struct ChemokinRunSummary {
    pub steps: u64,
    pub recorded_rows: u64,
    pub final_mass: f64,
    pub mass_drift: f64,
    pub violations: u64,
    /// Maximum kinetic-agent L1 distance for comparison runs; NaN
    /// otherwise.
    pub max_l1_distance: f64,
    pub wall_seconds: f64,
}

fn cstr_to_str<'a>(ptr: *const c_char) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(CHEMOKIN_ERR_NULL);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        CHEMOKIN_ERR_UTF8
    })
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message
/// length in bytes.
#[no_mangle]
pub extern "C" fn chemokin_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Loads and validates a scenario file. On success writes a handle into
/// `out` and returns `CHEMOKIN_OK`; the handle must be released with
/// `chemokin_scenario_free`.
#[no_mangle]
pub extern "C" fn chemokin_scenario_load(
    path: *const c_char,
    out: *mut *mut ChemokinScenario,
) -> i32 {
    if out.is_null() {
        set_error("null output handle");
        return CHEMOKIN_ERR_NULL;
    }
    let path = match cstr_to_str(path) {
        Ok(p) => p,
        Err(code) => return code,
    };
    match load_config(Path::new(path)) {
        Ok(inner) => {
            let handle = Box::new(ChemokinScenario { inner });
            unsafe { *out = Box::into_raw(handle) };
            CHEMOKIN_OK
        }
        Err(errors) => {
            let joined = errors
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            set_error(joined);
            unsafe { *out = ptr::null_mut() };
            CHEMOKIN_ERR_CONFIG
        }
    }
}

/// Releases a scenario handle. Null is allowed.
#[no_mangle]
pub extern "C" fn chemokin_scenario_free(scenario: *mut ChemokinScenario) {
    if !scenario.is_null() {
        drop(unsafe { Box::from_raw(scenario) });
    }
}

/// Runs the scenario, writing all output files into `out_dir`. `summary`
/// may be null.
#[no_mangle]
pub extern "C" fn chemokin_run(
    scenario: *const ChemokinScenario,
    out_dir: *const c_char,
    summary: *mut ChemokinRunSummary,
) -> i32 {
    if scenario.is_null() {
        set_error("null scenario handle");
        return CHEMOKIN_ERR_NULL;
    }
    let out_dir = match cstr_to_str(out_dir) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let loaded = unsafe { &(*scenario).inner };
    match run_scenario(loaded, Path::new(out_dir)) {
        Ok(s) => {
            if !summary.is_null() {
                unsafe {
                    *summary = ChemokinRunSummary {
                        steps: s.steps as u64,
                        recorded_rows: s.recorded_rows as u64,
                        final_mass: s.final_mass,
                        mass_drift: s.mass_drift,
                        violations: s.violations as u64,
                        max_l1_distance: s.compare_max_l1.unwrap_or(f64::NAN),
                        wall_seconds: s.wall_seconds,
                    };
                }
            }
            CHEMOKIN_OK
        }
        Err(e) => {
            set_error(e.to_string());
            CHEMOKIN_ERR_RUNTIME
        }
    }
}

/// Renders the growth-hypothesis validation report into `buf` (truncated,
/// NUL-terminated) and returns the full length in bytes.
#[no_mangle]
pub extern "C" fn chemokin_validation_report(
    scenario: *const ChemokinScenario,
    buf: *mut c_char,
    len: usize,
) -> usize {
    if scenario.is_null() {
        return 0;
    }
    let report = render_validation(unsafe { &(*scenario).inner });
    let bytes = report.as_bytes();
    if !buf.is_null() && len > 0 {
        let n = bytes.len().min(len - 1);
        unsafe {
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
    }
    bytes.len()
}

/// Solves the single-component elliptic signal equation
/// `d S'' + k n - k0 S = 0` on the periodic domain `[0, length)` for a
/// nodal density of `len` values. `s_out` and `dx_out` must hold `len`
/// doubles each; `dx_out` may be null.
#[no_mangle]
pub extern "C" fn chemokin_solve_elliptic(
    n: *const f64,
    len: usize,
    length: f64,
    diffusion: f64,
    production: f64,
    decay: f64,
    s_out: *mut f64,
    dx_out: *mut f64,
) -> i32 {
    if n.is_null() || s_out.is_null() {
        set_error("null array argument");
        return CHEMOKIN_ERR_NULL;
    }
    if len < 4 || !(length > 0.0) || !(diffusion > 0.0) || !(production > 0.0) || !(decay > 0.0)
    {
        set_error("elliptic solve needs len >= 4 and positive length, d, k, k0");
        return CHEMOKIN_ERR_CONFIG;
    }
    let density = unsafe { std::slice::from_raw_parts(n, len) };
    let grid = XGrid::new(length, len);
    let op = SpectralOp::new(&grid);
    let params = [chemokin::model::SignalComponent {
        diffusion,
        production,
        decay,
    }];
    match solve_elliptic(density, &params, &grid, &op, 0.0) {
        Ok(field) => {
            unsafe {
                ptr::copy_nonoverlapping(field.components[0].as_ptr(), s_out, len);
                if !dx_out.is_null() {
                    ptr::copy_nonoverlapping(field.dx[0].as_ptr(), dx_out, len);
                }
            }
            CHEMOKIN_OK
        }
        Err(e) => {
            set_error(e.to_string());
            CHEMOKIN_ERR_RUNTIME
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chemokin_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
