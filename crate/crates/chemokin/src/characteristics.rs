//! Back-time characteristics of the transport equation.
//!
//! For velocity `v` the position characteristic is the straight line
//! `X(s) = x - v (t - s)`; the internal state solves `dY/ds = F(S(X(s), s), Y)`
//! backward from `Y(t) = y`. The shipped dynamics is affine in `y`,
//!
//! ```text
//! dY/ds = A Y + g(S) c,   A = [[-1/t_e, -1/t_e], [0, -1/t_a]],
//!                         c = (1/t_e, 1/t_a)
//! ```
//!
//! so traces use the exact matrix exponential of `A` plus Gauss-Legendre
//! quadrature of the forcing; nothing becomes stiff when `t_e << t_a`. The
//! Jacobian of the back map with respect to `y` has the closed-form
//! determinant `exp[(1/t_e + 1/t_a)(t - s)]`, which is also what the
//! conservative phase-space remap uses. General (non-affine) dynamics fall
//! back to an embedded Dormand-Prince integrator.

use crate::error::{ChemoError, Result};
use crate::grid::{simpson, YBox, GL4_NODES, GL4_WEIGHTS};
use crate::model::{GrowthSpec, ModelConfig};
use crate::signal::SignalHistory;

/// Exact flow of the affine excitation-adaptation dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFlow {
    pub t_e: f64,
    pub t_a: f64,
}

impl AffineFlow {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        AffineFlow {
            t_e: cfg.excitation_time,
            t_a: cfg.adaptation_time,
        }
    }

    /// `-trace(A) = 1/t_e + 1/t_a`.
    #[inline]
    pub fn volume_rate(&self) -> f64 {
        1.0 / self.t_e + 1.0 / self.t_a
    }

    /// Matrix exponential `exp(A theta)`, valid for any sign of `theta`.
    #[inline]
    pub fn linear_map(&self, theta: f64) -> [[f64; 2]; 2] {
        let ee = (-theta / self.t_e).exp();
        let ea = (-theta / self.t_a).exp();
        let e12 = if (self.t_e - self.t_a).abs() > 1e-12 * self.t_a {
            (ee - ea) * self.t_a / (self.t_a - self.t_e)
        } else {
            -theta / self.t_e * ee
        };
        [[ee, e12], [0.0, ea]]
    }

    #[inline]
    fn apply(m: &[[f64; 2]; 2], y: [f64; 2]) -> [f64; 2] {
        [m[0][0] * y[0] + m[0][1] * y[1], m[1][0] * y[0] + m[1][1] * y[1]]
    }

    /// Flow over `theta` under a constant response value `g`. In shifted
    /// coordinates `z = (y1, y2 - g)` the dynamics is purely linear, so the
    /// map is exact.
    pub fn flow_const(&self, y: [f64; 2], g: f64, theta: f64) -> [f64; 2] {
        let e = self.linear_map(theta);
        let z = [y[0], y[1] - g];
        let z1 = Self::apply(&e, z);
        [z1[0], z1[1] + g]
    }

    /// Inverse of [`flow_const`] over the same interval.
    pub fn back_flow_const(&self, y: [f64; 2], g: f64, theta: f64) -> [f64; 2] {
        self.flow_const(y, g, -theta)
    }

    /// `int_t0^t1 exp(A (t1 - tau)) c g(tau) dtau` by composite 4-point
    /// Gauss-Legendre (two panels per call).
    fn forcing_integral<F>(&self, t0: f64, t1: f64, g_fn: &F) -> Result<[f64; 2]>
    where
        F: Fn(f64) -> Result<f64>,
    {
        let c = [1.0 / self.t_e, 1.0 / self.t_a];
        let mut acc = [0.0, 0.0];
        for panel in 0..2 {
            let a = t0 + 0.5 * (t1 - t0) * panel as f64;
            let b = a + 0.5 * (t1 - t0);
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            for (node, w) in GL4_NODES.iter().zip(GL4_WEIGHTS.iter()) {
                let tau = mid + half * node;
                let g = g_fn(tau)?;
                if !g.is_finite() {
                    return Err(ChemoError::ModelEval(format!(
                        "non-finite forcing g = {g} at tau = {tau}"
                    )));
                }
                let prop = self.linear_map(t1 - tau);
                let forced = Self::apply(&prop, [c[0] * g, c[1] * g]);
                acc[0] += w * half * forced[0];
                acc[1] += w * half * forced[1];
            }
        }
        Ok(acc)
    }

    /// Forward solution over `[t0, t1]` with a time-varying response along a
    /// straight run: `g_fn(tau)` supplies `g(S(X(tau), tau))`.
    pub fn flow_forced<F>(&self, y: [f64; 2], t0: f64, t1: f64, g_fn: F) -> Result<[f64; 2]>
    where
        F: Fn(f64) -> Result<f64>,
    {
        let e = self.linear_map(t1 - t0);
        let mut out = Self::apply(&e, y);
        let forcing = self.forcing_integral(t0, t1, &g_fn)?;
        out[0] += forcing[0];
        out[1] += forcing[1];
        Ok(out)
    }

    /// Backward solution over `[t0, t1]` given the state at `t1`.
    pub fn back_flow_forced<F>(&self, y_end: [f64; 2], t0: f64, t1: f64, g_fn: F) -> Result<[f64; 2]>
    where
        F: Fn(f64) -> Result<f64>,
    {
        let forcing = self.forcing_integral(t0, t1, &g_fn)?;
        let back = self.linear_map(-(t1 - t0));
        Ok(Self::apply(
            &back,
            [y_end[0] - forcing[0], y_end[1] - forcing[1]],
        ))
    }
}

/// Pluggable internal dynamics for non-affine models.
pub trait InternalDynamics {
    fn rhs(&self, s_value: &[f64], y: [f64; 2]) -> [f64; 2];
    fn div_y(&self, s_value: &[f64], y: [f64; 2]) -> f64;
}

/// The shipped excitation-adaptation dynamics as an [`InternalDynamics`].
pub struct CartoonDynamics<'a> {
    pub cfg: &'a ModelConfig,
}

impl InternalDynamics for CartoonDynamics<'_> {
    fn rhs(&self, s_value: &[f64], y: [f64; 2]) -> [f64; 2] {
        let g = self.cfg.g.eval(s_value);
        [
            (g - (y[0] + y[1])) / self.cfg.excitation_time,
            (g - y[1]) / self.cfg.adaptation_time,
        ]
    }

    fn div_y(&self, _s_value: &[f64], _y: [f64; 2]) -> f64 {
        -self.cfg.div_f_magnitude()
    }
}

/// One traced back-time characteristic.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicTrace {
    /// Increasing time samples spanning `[s, t]`.
    pub s_grid: Vec<f64>,
    /// `X(tau) = x - v (t - tau)`, unwrapped.
    pub x_path: Vec<f64>,
    pub y_path: Vec<[f64; 2]>,
    /// `det dY/dy` of the back map from `t` to each sample.
    pub jac_det: Vec<f64>,
}

impl CharacteristicTrace {
    pub fn start_state(&self) -> [f64; 2] {
        self.y_path[0]
    }
}

fn trace_sample_count(t: f64, s: f64, history: &SignalHistory) -> usize {
    let h_t = history.level_spacing();
    let base = if h_t > 0.0 {
        ((t - s) / h_t).ceil() as usize
    } else {
        0
    };
    let n = base.max(8);
    n + n % 2 // even interval count, for Simpson and Richardson halving
}

/// Traces the characteristic ending at `(x, v, y, t)` back to time `s`
/// using the exact affine integrator.
pub fn trace_characteristic(
    x: f64,
    v: f64,
    y: [f64; 2],
    t: f64,
    s: f64,
    history: &SignalHistory,
    cfg: &ModelConfig,
) -> Result<CharacteristicTrace> {
    if !(0.0 <= s && s <= t) {
        return Err(ChemoError::Argument(format!(
            "trace needs 0 <= s <= t, got s = {s}, t = {t}"
        )));
    }
    let flow = AffineFlow::from_config(cfg);
    let n = trace_sample_count(t, s, history);
    let dt = (t - s) / n as f64;
    let s_grid: Vec<f64> = (0..=n).map(|i| s + i as f64 * dt).collect();
    let x_path: Vec<f64> = s_grid.iter().map(|&tau| x - v * (t - tau)).collect();
    let g_at = |tau: f64| -> Result<f64> {
        history.response_at(x - v * (t - tau), tau, &cfg.g)
    };

    let mut y_path = vec![[0.0; 2]; n + 1];
    y_path[n] = y;
    for i in (0..n).rev() {
        y_path[i] = flow.back_flow_forced(y_path[i + 1], s_grid[i], s_grid[i + 1], &g_at)?;
    }
    let mu = flow.volume_rate();
    let jac_det = s_grid.iter().map(|&tau| (mu * (t - tau)).exp()).collect();
    Ok(CharacteristicTrace {
        s_grid,
        x_path,
        y_path,
        jac_det,
    })
}

/// Traces a characteristic for arbitrary internal dynamics with an embedded
/// Dormand-Prince 5(4) integrator at the given tolerance. Jacobian
/// determinants are filled from the divergence quadrature along the path.
pub fn trace_characteristic_general(
    x: f64,
    v: f64,
    y: [f64; 2],
    t: f64,
    s: f64,
    history: &SignalHistory,
    model: &dyn InternalDynamics,
    tol: f64,
) -> Result<CharacteristicTrace> {
    if !(0.0 <= s && s <= t) {
        return Err(ChemoError::Argument(format!(
            "trace needs 0 <= s <= t, got s = {s}, t = {t}"
        )));
    }
    let n = trace_sample_count(t, s, history);
    let dt = (t - s) / n as f64;
    let s_grid: Vec<f64> = (0..=n).map(|i| s + i as f64 * dt).collect();
    let x_path: Vec<f64> = s_grid.iter().map(|&tau| x - v * (t - tau)).collect();
    let rhs = |tau: f64, yy: [f64; 2]| -> Result<[f64; 2]> {
        let sv = history.value_at(x - v * (t - tau), tau)?;
        let f = model.rhs(&sv, yy);
        if f.iter().any(|c| !c.is_finite()) {
            return Err(ChemoError::ModelEval(format!(
                "non-finite dynamics at tau = {tau}"
            )));
        }
        Ok(f)
    };

    let mut y_path = vec![[0.0; 2]; n + 1];
    y_path[n] = y;
    for i in (0..n).rev() {
        y_path[i] = rk45_integrate(&rhs, y_path[i + 1], s_grid[i + 1], s_grid[i], tol)?;
    }

    let mut div_samples = Vec::with_capacity(n + 1);
    for (i, &tau) in s_grid.iter().enumerate() {
        let sv = history.value_at(x_path[i], tau)?;
        div_samples.push(model.div_y(&sv, y_path[i]));
    }
    // det over [tau, t] = exp(-int_tau^t div F); accumulate from the right.
    let mut jac_det = vec![1.0; n + 1];
    for i in (0..n).rev() {
        let seg = 0.5 * dt * (div_samples[i] + div_samples[i + 1]);
        jac_det[i] = jac_det[i + 1] * (-seg).exp();
    }
    Ok(CharacteristicTrace {
        s_grid,
        x_path,
        y_path,
        jac_det,
    })
}

/// Dormand-Prince 5(4) with step control, integrating from `t0` to `t1`
/// (either direction).
fn rk45_integrate<F>(rhs: &F, y0: [f64; 2], t0: f64, t1: f64, tol: f64) -> Result<[f64; 2]>
where
    F: Fn(f64, [f64; 2]) -> Result<[f64; 2]>,
{
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    const E1: f64 = 71.0 / 57600.0;
    const E3: f64 = -71.0 / 16695.0;
    const E4: f64 = 71.0 / 1920.0;
    const E5: f64 = -17253.0 / 339200.0;
    const E6: f64 = 22.0 / 525.0;
    const E7: f64 = -1.0 / 40.0;

    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y0);
    }
    let dir = span.signum();
    let mut h = span.abs().min(0.1_f64.max(span.abs() / 16.0)) * dir;
    let mut t = t0;
    let mut y = y0;
    let mut steps = 0usize;
    while (t1 - t) * dir > 1e-14 * (1.0 + t1.abs()) {
        steps += 1;
        if steps > 100_000 {
            return Err(ChemoError::ModelEval(
                "adaptive integrator exceeded step budget".into(),
            ));
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        let ax = |y: [f64; 2], ks: &[([f64; 2], f64)]| {
            let mut out = y;
            for (k, c) in ks {
                out[0] += h * c * k[0];
                out[1] += h * c * k[1];
            }
            out
        };
        let k1 = rhs(t, y)?;
        let k2 = rhs(t + 0.2 * h, ax(y, &[(k1, A21)]))?;
        let k3 = rhs(t + 0.3 * h, ax(y, &[(k1, A31), (k2, A32)]))?;
        let k4 = rhs(t + 0.8 * h, ax(y, &[(k1, A41), (k2, A42), (k3, A43)]))?;
        let k5 = rhs(
            t + 8.0 / 9.0 * h,
            ax(y, &[(k1, A51), (k2, A52), (k3, A53), (k4, A54)]),
        )?;
        let k6 = rhs(
            t + h,
            ax(y, &[(k1, A61), (k2, A62), (k3, A63), (k4, A64), (k5, A65)]),
        )?;
        let y5 = ax(y, &[(k1, B1), (k3, B3), (k4, B4), (k5, B5), (k6, B6)]);
        let k7 = rhs(t + h, y5)?;
        let err = {
            let mut e = 0.0f64;
            for d in 0..2 {
                let ed = h
                    * (E1 * k1[d] + E3 * k3[d] + E4 * k4[d] + E5 * k5[d] + E6 * k6[d]
                        + E7 * k7[d]);
                let sc = tol * (1.0 + y[d].abs().max(y5[d].abs()));
                e = e.max((ed / sc).abs());
            }
            e
        };
        if err <= 1.0 {
            t += h;
            y = y5;
        }
        let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
        h *= factor;
        if h.abs() < 1e-14 {
            return Err(ChemoError::ModelEval("integrator step underflow".into()));
        }
    }
    Ok(y)
}

/// Closed-form Jacobian determinant of the back map for the affine
/// dynamics: `exp[(1/t_e + 1/t_a) elapsed] >= 1`.
pub fn jacobian_det_cartoon(cfg: &ModelConfig, elapsed: f64) -> Result<f64> {
    if elapsed < 0.0 {
        return Err(ChemoError::Argument(format!(
            "elapsed must be >= 0, got {elapsed}"
        )));
    }
    Ok((AffineFlow::from_config(cfg).volume_rate() * elapsed).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianEstimate {
    pub value: f64,
    /// Richardson error estimate of the divergence quadrature.
    pub richardson_error: f64,
    pub converged: bool,
}

/// `exp[-int_s^t div_y F dtau]` by composite Simpson on the trace samples,
/// with a Richardson half-resolution comparison as a convergence flag.
pub fn jacobian_det_general<F>(trace: &CharacteristicTrace, div_f: F) -> JacobianEstimate
where
    F: Fn(f64, [f64; 2]) -> f64,
{
    let n = trace.s_grid.len() - 1;
    let (s, t) = (trace.s_grid[0], trace.s_grid[n]);
    if t == s {
        return JacobianEstimate {
            value: 1.0,
            richardson_error: 0.0,
            converged: true,
        };
    }
    let samples: Vec<f64> = trace
        .s_grid
        .iter()
        .zip(&trace.y_path)
        .map(|(&tau, &y)| div_f(tau, y))
        .collect();
    let eval_full = |tau: f64| sample_lookup(&trace.s_grid, &samples, tau);
    let integral = simpson(eval_full, s, t, n);
    let coarse = simpson(eval_full, s, t, n / 2);
    let richardson_error = (integral - coarse).abs() / 15.0;
    let tol = 1e-8 * (1.0 + integral.abs());
    JacobianEstimate {
        value: (-integral).exp(),
        richardson_error,
        converged: richardson_error <= tol,
    }
}

fn sample_lookup(grid: &[f64], samples: &[f64], tau: f64) -> f64 {
    let n = grid.len() - 1;
    let h = (grid[n] - grid[0]) / n as f64;
    let pos = ((tau - grid[0]) / h).clamp(0.0, n as f64);
    let i = (pos.floor() as usize).min(n - 1);
    let w = pos - i as f64;
    samples[i] * (1.0 - w) + samples[i + 1] * w
}

/// A priori coordinate box containing the internal state for all times,
/// from the explicit trajectory estimates
///
/// ```text
/// |Y2| <= |Y2(0)| + max(1, 1/t_a^2) Phi(sup |S|)
/// |Y1| <= |Y1(0)| + max(1, 1/t_e^2) (sup |Y2| + Phi(sup |S|))
/// ```
///
/// The `max(1, .)` keeps the coefficients valid for time constants above
/// one, where the bare `1/t^2` factors would undershoot the exact
/// variation-of-constants bound (the forcing convolution kernel has unit
/// integral).
pub fn internal_state_box(
    sup_s: f64,
    cfg: &ModelConfig,
    gs: &GrowthSpec,
    y0_box: &YBox,
) -> YBox {
    let phi = gs.phi.eval(sup_s);
    let c_a = (1.0 / (cfg.adaptation_time * cfg.adaptation_time)).max(1.0);
    let c_e = (1.0 / (cfg.excitation_time * cfg.excitation_time)).max(1.0);
    let y2_0 = y0_box.lo[1].abs().max(y0_box.hi[1].abs());
    let y1_0 = y0_box.lo[0].abs().max(y0_box.hi[0].abs());
    let b2 = y2_0 + c_a * phi;
    let b1 = y1_0 + c_e * (b2 + phi);
    YBox {
        lo: [-b1, -b2],
        hi: [b1, b2],
    }
}
