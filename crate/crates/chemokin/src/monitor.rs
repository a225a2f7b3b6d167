//! Runtime verification of the a priori estimates.
//!
//! Every analytic bound becomes a ledger row `(t, id, measured, bound,
//! margin)`; a negative margin is recorded as a violation, never a crash --
//! violations are data.
//!
//! The phase-space estimate monitored for the elliptic system is the
//! logarithmic Gronwall envelope of `w(t) = |f(t)|_L2`. With the turning
//! rate controlled by
//!
//! ```text
//! lambda(y1) <= c_lambda (1 + Lambda(|S|) + |dC/dt|),
//! |dC/dt| <= v_max |dS/dx|_inf + |dS/dt|_inf,
//! ```
//!
//! the explicit signal bounds (logarithmic in `|n|_L2`), the divergence
//! bound `|div_y F| <= c_div (1 + Pi(|S|_inf))`, and the Cauchy-Schwarz
//! link `|n|_L2 <= c_n |f|_L2` with `c_n = sqrt(|V| vol(Y))`, the shifted
//! quantity `z = c_n w + 1 > 1` satisfies `z' <= z (alpha + beta ln z)` for
//! fully explicit constants `alpha`, `beta`. The generalized Gronwall lemma
//! then yields the envelope
//!
//! ```text
//! ln Z(t) = e^(beta t) [ ln z(0) + (alpha/beta)(1 - e^(-beta t)) ],
//! ```
//!
//! which the ledger compares against the measured `ln z(t)`. Envelopes are
//! stored in log space: the doubly exponential bound overflows `f64` long
//! before the measured quantities do.

use crate::error::{ChemoError, Result};
use crate::grid::XGrid;
use crate::model::{GrowthSpec, ModelConfig};
use crate::signal::{BoundReport, SignalMode};

/// Generalized Gronwall envelope for `w' <= a(t) w ln w + b(t) w`:
///
/// ```text
/// w(t) <= [ w(0) exp( int_0^t b(s) e^(-int_0^s a) ds ) ]^( exp(int_0^t a) )
/// ```
///
/// evaluated on `t_grid` by nested quadrature (RK4 on the cumulative
/// integrals). Requires `w0 > 0`.
pub fn gronwall_envelope<A, B>(w0: f64, a: A, b: B, t_grid: &[f64]) -> Result<Vec<f64>>
where
    A: Fn(f64) -> f64,
    B: Fn(f64) -> f64,
{
    Ok(gronwall_envelope_log(w0, a, b, t_grid)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Logarithm of the Gronwall envelope; use this for constants that blow up
/// past the floating-point range.
pub fn gronwall_envelope_log<A, B>(w0: f64, a: A, b: B, t_grid: &[f64]) -> Result<Vec<f64>>
where
    A: Fn(f64) -> f64,
    B: Fn(f64) -> f64,
{
    if !(w0 > 0.0) {
        return Err(ChemoError::Argument(format!(
            "Gronwall envelope needs w0 > 0 (log of the initial value), got {w0}"
        )));
    }
    if t_grid.is_empty() {
        return Ok(Vec::new());
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid[0] < 0.0 {
        return Err(ChemoError::Argument(
            "t_grid must be nondecreasing and nonnegative".into(),
        ));
    }
    let t_max = *t_grid.last().unwrap();
    let ln_w0 = w0.ln();
    // Integrate A(t) = int_0^t a and I(t) = int_0^t b e^(-A) jointly with
    // RK4 on a ladder that contains every requested node.
    let h_target: f64 = (t_max / 4096.0).max(1e-9);
    let mut out = Vec::with_capacity(t_grid.len());
    let mut t = 0.0f64;
    let mut acc_a = 0.0f64;
    let mut acc_i = 0.0f64;
    for &target in t_grid {
        while t < target {
            let h = h_target.min(target - t);
            let (k1a, k1i) = (a(t), b(t) * (-acc_a).exp());
            let a_half = acc_a + 0.5 * h * k1a;
            let (k2a, k2i) = (a(t + 0.5 * h), b(t + 0.5 * h) * (-a_half).exp());
            let a_half2 = acc_a + 0.5 * h * k2a;
            let (k3a, k3i) = (a(t + 0.5 * h), b(t + 0.5 * h) * (-a_half2).exp());
            let a_full = acc_a + h * k3a;
            let (k4a, k4i) = (a(t + h), b(t + h) * (-a_full).exp());
            acc_a += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
            acc_i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
            t += h;
        }
        out.push(acc_a.exp() * (ln_w0 + acc_i));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Elliptic-coupling ledger
// ---------------------------------------------------------------------------

/// One monitored sample of a running simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSample {
    pub t: f64,
    pub mass: f64,
    pub f_l1: f64,
    pub f_l2: f64,
    pub f_linf: f64,
    pub n_peak: f64,
    pub n_variance: f64,
    pub n_l1: f64,
    pub n_l2: f64,
    /// Measured inverse Jacobian determinant of the back map over `[0, t]`.
    pub det_inv: f64,
    /// Mean of the response variable over the phase-space density (or the
    /// agent population).
    pub y1_mean: f64,
    /// Measured per-component signal sup norms.
    pub s_sup: Vec<f64>,
    pub s_dx_sup: Vec<f64>,
    pub s_dt_sup: Vec<f64>,
}

/// Explicit envelope constants, derived once per scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeConstants {
    pub alpha: f64,
    pub beta: f64,
    pub c_n: f64,
    pub s_bar: f64,
    pub jac_rate: f64,
    /// Multiplies every reported bound; `1.0` for monitoring, `0.5` for the
    /// deliberately mis-specified negative control.
    pub scale: f64,
    pub description: String,
}

impl EnvelopeConstants {
    pub fn derive(
        cfg: &ModelConfig,
        gs: &GrowthSpec,
        y_box_volume: f64,
        n1_0: f64,
    ) -> EnvelopeConstants {
        let v = cfg.velocities.max_speed();
        let v_measure = cfg.velocities.measure();
        let c_n = (v_measure * y_box_volume).sqrt();
        let sqrt2 = std::f64::consts::SQRT_2;
        let s_bar: f64 = cfg
            .signal
            .iter()
            .map(|c| std::f64::consts::PI * c.production * n1_0 / (c.diffusion * c.decay).sqrt())
            .sum();
        let mut alpha = gs.c_div * (1.0 + gs.pi.eval(s_bar)) / 2.0
            + gs.c_lambda * (1.0 + gs.lambda_growth.eval(s_bar));
        let mut beta = 0.0;
        for c in &cfg.signal {
            let kappa = c.production / c.diffusion;
            let r = c.diffusion / c.decay;
            // v |dS/dx| + |dS/dt| <= kappa [ v n1 ln(1 + r) + v sqrt2
            //   + v n1 ln(1 + r v^4) + sqrt2 + 8 v n1 ln z ].
            alpha += gs.c_lambda
                * kappa
                * (v * n1_0 * (1.0 + r).ln() + v * sqrt2 + v * n1_0 * (1.0 + r * v.powi(4)).ln()
                    + sqrt2);
            beta += gs.c_lambda * kappa * 8.0 * v * n1_0;
        }
        let jac_rate = gs.c_div * (1.0 + gs.pi.eval(s_bar));
        let description = format!(
            "envelope constants: |n|_L2 <= c_n |f|_L2 with c_n = sqrt(|V| vol(Y)) = {c_n:.6e}; \
             |S|_inf <= S_bar = sum_i pi k_i |n(0)|_L1 / sqrt(d_i k_i0) = {s_bar:.6e}; \
             d/dt |f|_L2 <= |f|_L2 [ c_div (1 + Pi(S_bar))/2 \
             + c_lambda (1 + Lambda(S_bar) + v |dS/dx| + |dS/dt|) ] using the doubly \
             stochastic kernel contraction |K f|_L2 <= |f|_L2; with the split-integral \
             signal bounds and ln(x^4 r + 1) <= ln(1 + r) + 4 ln(x + 1) this closes to \
             z' <= z (alpha + beta ln z) for z = c_n |f|_L2 + 1: alpha = {alpha:.6e}, \
             beta = {beta:.6e}; |n(0)|_L1 = {n1_0:.6e}. Jacobian bound: ln(1/det) <= \
             c_div (1 + Pi(S_bar)) t = {jac_rate:.6e} t."
        );
        EnvelopeConstants {
            alpha,
            beta,
            c_n,
            s_bar,
            jac_rate,
            scale: 1.0,
            description,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub t: f64,
    pub id: String,
    pub measured: f64,
    pub bound: f64,
    /// `bound - measured`; negative margins are violations and stay in the
    /// record.
    pub margin: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundLedger {
    pub header: String,
    pub rows: Vec<LedgerRow>,
}

impl BoundLedger {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }
}

fn push_row(rows: &mut Vec<LedgerRow>, t: f64, id: String, measured: f64, bound: f64) {
    let margin = bound - measured;
    rows.push(LedgerRow {
        t,
        id,
        measured,
        bound,
        margin,
        violated: margin < 0.0,
    });
}

/// Assembles the ledger for an elliptic-coupling run: the `|f|_L2`
/// Gronwall envelope (in log space), the Jacobian inverse bound, and the
/// per-component signal bounds from the report series.
pub fn check_elliptic_bounds(
    moments: &[MomentSample],
    reports: &[BoundReport],
    consts: &EnvelopeConstants,
) -> Result<BoundLedger> {
    if moments.is_empty() {
        return Ok(BoundLedger {
            header: consts.description.clone(),
            rows: Vec::new(),
        });
    }
    if moments.len() != reports.len() {
        return Err(ChemoError::Argument(format!(
            "moment series ({}) and bound-report series ({}) are misaligned",
            moments.len(),
            reports.len()
        )));
    }
    let t0 = moments[0].t;
    if moments.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(ChemoError::Argument("moment series not time-sorted".into()));
    }
    let ln_scale = consts.scale.ln();
    let z0 = consts.c_n * moments[0].f_l2 + 1.0;
    let t_grid: Vec<f64> = moments.iter().map(|m| m.t - t0).collect();
    let envelope_log = gronwall_envelope_log(
        z0,
        |_| consts.beta,
        |_| consts.alpha,
        &t_grid,
    )?;

    let mut rows = Vec::new();
    for (k, m) in moments.iter().enumerate() {
        let elapsed = m.t - t0;
        // Phase-space L2 envelope, compared through z = c_n w + 1.
        let measured_z = (consts.c_n * m.f_l2 + 1.0).ln();
        push_row(
            &mut rows,
            m.t,
            "phase-l2-envelope-log".into(),
            measured_z,
            envelope_log[k] + ln_scale,
        );
        // Jacobian inverse bound (log space).
        push_row(
            &mut rows,
            m.t,
            "jacobian-inverse-log".into(),
            m.det_inv.ln(),
            consts.jac_rate * elapsed + ln_scale,
        );
        // Signal bounds: measured sup norms against the explicit report.
        let rep = &reports[k];
        push_signal_rows(
            &mut rows,
            m,
            rep,
            consts.scale,
            matches!(rep.mode, SignalMode::Elliptic),
        );
    }
    Ok(BoundLedger {
        header: format!(
            "{}; bound scale factor = {}",
            consts.description, consts.scale
        ),
        rows,
    })
}

fn push_signal_rows(
    rows: &mut Vec<LedgerRow>,
    m: &MomentSample,
    rep: &BoundReport,
    scale: f64,
    with_dt: bool,
) {
    for (i, comp) in rep.per_component.iter().enumerate() {
        if let Some(&meas) = m.s_sup.get(i) {
            push_row(rows, m.t, format!("signal-sup[{i}]"), meas, comp.sup * scale);
        }
        if let Some(&meas) = m.s_dx_sup.get(i) {
            push_row(rows, m.t, format!("signal-dx[{i}]"), meas, comp.dx * scale);
        }
        if with_dt {
            if let (Some(&meas), Some(bound)) = (m.s_dt_sup.get(i), comp.dt) {
                push_row(rows, m.t, format!("signal-dt[{i}]"), meas, bound * scale);
            }
        }
    }
}

/// Ledger for parabolic-coupling runs: the Jacobian inverse bound plus the
/// signal sup and gradient bounds (the parabolic estimate does not cover
/// the temporal derivative).
pub fn check_parabolic_bounds(
    moments: &[MomentSample],
    reports: &[BoundReport],
    consts: &EnvelopeConstants,
) -> Result<BoundLedger> {
    if moments.len() != reports.len() {
        return Err(ChemoError::Argument(format!(
            "moment series ({}) and bound-report series ({}) are misaligned",
            moments.len(),
            reports.len()
        )));
    }
    let t0 = moments.first().map(|m| m.t).unwrap_or(0.0);
    let ln_scale = consts.scale.ln();
    let mut rows = Vec::new();
    for (m, rep) in moments.iter().zip(reports) {
        push_row(
            &mut rows,
            m.t,
            "jacobian-inverse-log".into(),
            m.det_inv.ln(),
            consts.jac_rate * (m.t - t0) + ln_scale,
        );
        push_signal_rows(&mut rows, m, rep, consts.scale, false);
    }
    Ok(BoundLedger {
        header: format!(
            "{}; bound scale factor = {}",
            consts.description, consts.scale
        ),
        rows,
    })
}

/// Signal-bound rows only; used for agent-mode runs where no phase-space
/// norms exist.
pub fn check_signal_bounds(
    moments: &[MomentSample],
    reports: &[BoundReport],
    consts: &EnvelopeConstants,
) -> Result<BoundLedger> {
    if moments.len() != reports.len() {
        return Err(ChemoError::Argument(format!(
            "moment series ({}) and bound-report series ({}) are misaligned",
            moments.len(),
            reports.len()
        )));
    }
    let mut rows = Vec::new();
    for (m, rep) in moments.iter().zip(reports) {
        let with_dt = matches!(rep.mode, SignalMode::Elliptic);
        push_signal_rows(&mut rows, m, rep, consts.scale, with_dt);
    }
    Ok(BoundLedger {
        header: format!(
            "{}; bound scale factor = {}",
            consts.description, consts.scale
        ),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Concentration metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationMetrics {
    pub peak_value: f64,
    pub peak_location: f64,
    pub variance: f64,
    pub mass: f64,
}

/// Peak, leftmost argmax, and the second central moment of `n / mass`.
///
/// The mean is circular (resultant direction of the density on the ring);
/// when the support is narrower than half the domain this coincides with
/// the linear mean of the unwrapped support. Distances are signed periodic
/// offsets, so a uniform density has variance `L^2 / 12`.
pub fn concentration_metrics(n: &[f64], grid: &XGrid) -> Result<ConcentrationMetrics> {
    if n.len() != grid.n {
        return Err(ChemoError::Argument("density length mismatch".into()));
    }
    let h = grid.h();
    let mass: f64 = n.iter().sum::<f64>() * h;
    if !(mass > 0.0) {
        return Err(ChemoError::Argument(format!(
            "concentration metrics need positive mass, got {mass}"
        )));
    }
    let mut peak_value = f64::NEG_INFINITY;
    let mut peak_idx = 0;
    for (i, &v) in n.iter().enumerate() {
        if v > peak_value {
            peak_value = v;
            peak_idx = i;
        }
    }
    // Circular mean.
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut cs = 0.0;
    let mut sn = 0.0;
    for (i, &v) in n.iter().enumerate() {
        let theta = two_pi * grid.node(i) / grid.length;
        cs += v * theta.cos();
        sn += v * theta.sin();
    }
    let resultant = (cs * cs + sn * sn).sqrt() * h / mass;
    let x_c = if resultant > 1e-12 {
        grid.wrap(sn.atan2(cs) / two_pi * grid.length)
    } else {
        0.0
    };
    let mut first = 0.0;
    let mut second = 0.0;
    for (i, &v) in n.iter().enumerate() {
        let d = grid.signed_distance(grid.node(i), x_c);
        first += v * d;
        second += v * d * d;
    }
    first *= h / mass;
    second *= h / mass;
    let variance = second - first * first;
    Ok(ConcentrationMetrics {
        peak_value,
        peak_location: grid.node(peak_idx),
        variance,
        mass,
    })
}
