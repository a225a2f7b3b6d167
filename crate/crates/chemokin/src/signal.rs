//! Extracellular signal equations on the periodic domain.
//!
//! Two modes are supported for each component `S_i` driven by the cell
//! density `n`:
//!
//! * elliptic (quasi-equilibrium):  `d_i S_i'' + k_i n - k_i^0 S_i = 0`
//! * parabolic:                     `dS_i/dt = d_i S_i'' + k_i n - k_i^0 S_i`
//!
//! Both are solved spectrally on discrete modes `xi_j = 2 pi j / L`. The
//! elliptic solution is `S_hat = (k/d) n_hat / (xi^2 + k0/d)`; the parabolic
//! step integrates each mode exactly with the source frozen over the step,
//! so the spatially uniform mode is advanced without time-stepping error and
//! large diffusion constants cause no stiffness.
//!
//! `signal_bound_report` evaluates the explicit sup-norm and derivative
//! bounds that the analysis provides for these equations. The transform
//! convention is `h_hat(xi) = integral h e^(-i xi x) dx` with the inverse
//! carrying `1/(2 pi)`; the reported constants drop the `1/(2 pi)` factor
//! (which only loosens the bound) and split the derivative integral at
//! `R = |n|_L2^2`, bounding the tail by `sqrt(2)`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{ChemoError, Result};
use crate::grid::XGrid;
use crate::model::{ReactionVariant, SignalComponent, SignalResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalMode {
    Elliptic,
    Parabolic,
}

/// Cached FFT plans and mode frequencies for one grid size.
pub struct SpectralOp {
    n: usize,
    length: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Signed frequencies `2 pi j / L`.
    xi: Vec<f64>,
}

impl SpectralOp {
    pub fn new(grid: &XGrid) -> Self {
        let mut planner = FftPlanner::new();
        let n = grid.n;
        let two_pi = 2.0 * std::f64::consts::PI;
        let xi = (0..n)
            .map(|j| {
                let k = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                two_pi * k / grid.length
            })
            .collect();
        SpectralOp {
            n,
            length: grid.length,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            xi,
        }
    }

    pub fn modes(&self, real: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = real.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    pub fn to_real(&self, mut modes: Vec<Complex<f64>>) -> Vec<f64> {
        self.inverse.process(&mut modes);
        let scale = 1.0 / self.n as f64;
        modes.iter().map(|c| c.re * scale).collect()
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    /// Spectral first derivative of a periodic nodal function.
    pub fn derivative(&self, values: &[f64]) -> Vec<f64> {
        let mut modes = self.modes(values);
        for (m, &xi) in modes.iter_mut().zip(&self.xi) {
            *m *= Complex::new(0.0, xi);
        }
        self.to_real(modes)
    }

    /// Spectral second derivative.
    pub fn second_derivative(&self, values: &[f64]) -> Vec<f64> {
        let mut modes = self.modes(values);
        for (m, &xi) in modes.iter_mut().zip(&self.xi) {
            *m *= -xi * xi;
        }
        self.to_real(modes)
    }

    pub fn length(&self) -> f64 {
        self.length
    }
}

/// Signal snapshot: component values plus cached spatial and temporal
/// derivatives on the x-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalField {
    pub grid: XGrid,
    pub time: f64,
    pub components: Vec<Vec<f64>>,
    pub dx: Vec<Vec<f64>>,
    pub dt: Vec<Vec<f64>>,
}

impl SignalField {
    pub fn zeros(grid: &XGrid, m: usize, time: f64) -> Self {
        SignalField {
            grid: grid.clone(),
            time,
            components: vec![vec![0.0; grid.n]; m],
            dx: vec![vec![0.0; grid.n]; m],
            dt: vec![vec![0.0; grid.n]; m],
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn sup_norm(&self, comp: usize) -> f64 {
        self.components[comp].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn dx_sup_norm(&self, comp: usize) -> f64 {
        self.dx[comp].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn dt_sup_norm(&self, comp: usize) -> f64 {
        self.dt[comp].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.components
            .iter()
            .chain(self.dx.iter())
            .chain(self.dt.iter())
            .all(|arr| arr.iter().all(|v| v.is_finite()))
    }
}

/// Solves the elliptic signal equation for every component. The temporal
/// derivative is left at zero; couple it to the macroscopic flux with
/// [`fill_dt_from_flux`].
pub fn solve_elliptic(
    n: &[f64],
    params: &[SignalComponent],
    grid: &XGrid,
    op: &SpectralOp,
    time: f64,
) -> Result<SignalField> {
    if grid.n == 0 || n.len() != grid.n {
        return Err(ChemoError::Argument(format!(
            "density length {} does not match grid size {}",
            n.len(),
            grid.n
        )));
    }
    if n.iter().any(|v| !v.is_finite()) {
        return Err(ChemoError::Argument("density must be finite".into()));
    }
    let n_modes = op.modes(n);
    let mut field = SignalField::zeros(grid, params.len(), time);
    for (i, c) in params.iter().enumerate() {
        let a2 = c.decay / c.diffusion;
        let gain = c.production / c.diffusion;
        let s_modes: Vec<Complex<f64>> = n_modes
            .iter()
            .zip(op.xi())
            .map(|(nm, &xi)| nm * (gain / (xi * xi + a2)))
            .collect();
        let dx_modes: Vec<Complex<f64>> = s_modes
            .iter()
            .zip(op.xi())
            .map(|(sm, &xi)| sm * Complex::new(0.0, xi))
            .collect();
        field.components[i] = op.to_real(s_modes);
        field.dx[i] = op.to_real(dx_modes);
    }
    Ok(field)
}

/// Time derivative of the elliptic signal, obtained by differentiating the
/// elliptic relation in time and substituting the continuity equation
/// `dn/dt = -dj/dx`: each component solves
/// `d (S_t)'' - k0 S_t = k dj/dx`.
pub fn fill_dt_from_flux(
    field: &mut SignalField,
    flux: &[f64],
    params: &[SignalComponent],
    op: &SpectralOp,
) {
    let j_modes = op.modes(flux);
    for (i, c) in params.iter().enumerate() {
        let a2 = c.decay / c.diffusion;
        let gain = c.production / c.diffusion;
        let st_modes: Vec<Complex<f64>> = j_modes
            .iter()
            .zip(op.xi())
            .map(|(jm, &xi)| jm * Complex::new(0.0, -xi) * (gain / (xi * xi + a2)))
            .collect();
        field.dt[i] = op.to_real(st_modes);
    }
}

/// Advances the parabolic signal by one step with the density frozen at the
/// supplied (midpoint) value. Diffusion and decay are integrated exactly
/// per mode; for the consuming reaction the `-k n S` term is applied as an
/// exact pointwise integrating factor after the spectral sweep.
pub fn step_parabolic(
    field: &SignalField,
    n: &[f64],
    dt: f64,
    params: &[SignalComponent],
    reaction: ReactionVariant,
    op: &SpectralOp,
) -> Result<SignalField> {
    if !(dt > 0.0) {
        return Err(ChemoError::Argument(format!("dt must be > 0, got {dt}")));
    }
    let n_modes = op.modes(n);
    let mut out = SignalField::zeros(&field.grid, params.len(), field.time + dt);
    for (i, c) in params.iter().enumerate() {
        let mut s_modes = op.modes(&field.components[i]);
        match reaction {
            ReactionVariant::ProduceDegrade => {
                for ((sm, nm), &xi) in s_modes.iter_mut().zip(&n_modes).zip(op.xi()) {
                    let gamma = c.diffusion * xi * xi + c.decay;
                    let decay = (-gamma * dt).exp();
                    let steady = nm * (c.production / gamma);
                    *sm = steady + (*sm - steady) * decay;
                }
            }
            ReactionVariant::Consume => {
                for (sm, &xi) in s_modes.iter_mut().zip(op.xi()) {
                    let gamma = c.diffusion * xi * xi + c.decay;
                    *sm *= (-gamma * dt).exp();
                }
            }
        }
        let mut values = op.to_real(s_modes);
        if matches!(reaction, ReactionVariant::Consume) {
            for (v, &ni) in values.iter_mut().zip(n) {
                *v *= (-c.production * ni * dt).exp();
            }
        }
        out.dx[i] = op.derivative(&values);
        // dt S from the PDE right-hand side at the new state.
        let second = op.second_derivative(&values);
        out.dt[i] = values
            .iter()
            .zip(&second)
            .zip(n)
            .map(|((&s, &spp), &ni)| {
                let reaction_term = match reaction {
                    ReactionVariant::ProduceDegrade => c.production * ni - c.decay * s,
                    ReactionVariant::Consume => -c.production * ni * s - c.decay * s,
                };
                c.diffusion * spp + reaction_term
            })
            .collect();
        out.components[i] = values;
    }
    Ok(out)
}

/// Maximum elliptic residual `|d S'' + k n - k0 S|_inf` over components,
/// relative to `max(1, |k n|_inf)`.
pub fn elliptic_residual(
    field: &SignalField,
    n: &[f64],
    params: &[SignalComponent],
    op: &SpectralOp,
) -> f64 {
    let mut worst = 0.0f64;
    for (i, c) in params.iter().enumerate() {
        let second = op.second_derivative(&field.components[i]);
        let mut res = 0.0f64;
        let mut scale = 1.0f64;
        for ((spp, s), ni) in second.iter().zip(&field.components[i]).zip(n) {
            res = res.max((c.diffusion * spp + c.production * ni - c.decay * s).abs());
            scale = scale.max((c.production * ni).abs());
        }
        worst = worst.max(res / scale);
    }
    worst
}

// ---------------------------------------------------------------------------
// Explicit bounds
// ---------------------------------------------------------------------------

/// Inputs shared by every bound formula.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams<'a> {
    pub components: &'a [SignalComponent],
    pub max_speed: f64,
    pub mode: SignalMode,
    /// Parabolic mode only: sup norms of the initial signal and its
    /// spatial derivative.
    pub s0_sup: f64,
    pub s0_dx_sup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentBounds {
    pub sup: f64,
    pub dx: f64,
    /// Elliptic mode only; the parabolic estimate covers the value and the
    /// spatial derivative.
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub mode: SignalMode,
    pub per_component: Vec<ComponentBounds>,
    pub constants_note: String,
}

impl BoundReport {
    pub fn sup_total(&self) -> f64 {
        self.per_component.iter().map(|c| c.sup).sum()
    }
    pub fn dx_total(&self) -> f64 {
        self.per_component.iter().map(|c| c.dx).sum()
    }
    pub fn dt_total(&self) -> f64 {
        self.per_component.iter().filter_map(|c| c.dt).sum()
    }
}

/// Explicit upper bounds for `|S|_inf`, `|dS/dx|_inf` and (elliptic mode)
/// `|dS/dt|_inf` in terms of the density norms. All bounds are monotone
/// nondecreasing in both norms.
pub fn signal_bound_report(n_l1: f64, n_l2: f64, params: &BoundParams) -> Result<BoundReport> {
    if !(n_l1 >= 0.0 && n_l2 >= 0.0) {
        return Err(ChemoError::Argument("density norms must be >= 0".into()));
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    let pi = std::f64::consts::PI;
    let v = params.max_speed;
    let per_component = params
        .components
        .iter()
        .map(|c| {
            let ratio = c.diffusion / c.decay; // d / k0
            let kd = c.production / c.diffusion; // k / d
            match params.mode {
                SignalMode::Elliptic => {
                    let sup = pi * c.production * n_l1 / (c.diffusion * c.decay).sqrt();
                    let dx = kd * (n_l1 * (n_l2.powi(4) * ratio + 1.0).ln() + sqrt2);
                    let j_l1 = v * n_l1;
                    let j_l2 = v * n_l2;
                    let dt = kd * (j_l1 * (j_l2.powi(4) * ratio + 1.0).ln() + sqrt2);
                    ComponentBounds {
                        sup,
                        dx,
                        dt: Some(dt),
                    }
                }
                SignalMode::Parabolic => {
                    let sup =
                        params.s0_sup + 0.5 * c.production * n_l1 / (c.diffusion * c.decay).sqrt();
                    let dx = params.s0_dx_sup
                        + kd * (n_l1 * (n_l2.powi(4) * ratio + 1.0).ln() + sqrt2);
                    ComponentBounds { sup, dx, dt: None }
                }
            }
        })
        .collect();
    let constants_note = match params.mode {
        SignalMode::Elliptic => format!(
            "elliptic bounds, convention h_hat = int h e^(-i xi x) dx: \
             sup_i = pi k_i |n|_L1 / sqrt(d_i k_i0); \
             dx_i = (k_i/d_i)(|n|_L1 ln(|n|_L2^4 d_i/k_i0 + 1) + sqrt(2)) \
             [integral split at R = |n|_L2^2, tail <= sqrt(2)]; \
             dt_i uses the flux norms |j|_Lp <= v_max |n|_Lp with v_max = {v}"
        ),
        SignalMode::Parabolic => format!(
            "parabolic bounds via the heat semigroup (L_inf contraction) plus \
             the mode-integral estimates: sup_i = |S0|_inf + k_i |n|_L1 / \
             (2 sqrt(d_i k_i0)); dx_i = |dS0/dx|_inf + elliptic-form gradient \
             term with the running max of |n|_L2; v_max = {v}"
        ),
    };
    Ok(BoundReport {
        mode: params.mode,
        per_component,
        constants_note,
    })
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

/// Recorded signal levels with linear interpolation in time and cubic
/// interpolation in space.
#[derive(Debug, Clone)]
pub struct SignalHistory {
    levels: Vec<SignalField>,
}

impl SignalHistory {
    pub fn new() -> Self {
        SignalHistory { levels: Vec::new() }
    }

    pub fn with_level(field: SignalField) -> Self {
        SignalHistory {
            levels: vec![field],
        }
    }

    pub fn push(&mut self, field: SignalField) {
        if let Some(last) = self.levels.last() {
            assert!(
                field.time >= last.time,
                "signal history times must be nondecreasing"
            );
        }
        self.levels.push(field);
    }

    pub fn levels(&self) -> &[SignalField] {
        &self.levels
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        match (self.levels.first(), self.levels.last()) {
            (Some(a), Some(b)) => Some((a.time, b.time)),
            _ => None,
        }
    }

    /// Typical level spacing, used to choose trace resolutions.
    pub fn level_spacing(&self) -> f64 {
        match self.time_range() {
            Some((lo, hi)) if self.levels.len() > 1 => (hi - lo) / (self.levels.len() - 1) as f64,
            _ => 0.0,
        }
    }

    fn bracket(&self, t: f64) -> Result<(usize, usize, f64)> {
        let (lo, hi) = self
            .time_range()
            .ok_or_else(|| ChemoError::Argument("empty signal history".into()))?;
        let slack = 1e-9 * (1.0 + hi.abs());
        if t < lo - slack || t > hi + slack {
            return Err(ChemoError::HistoryGap { t, lo, hi });
        }
        if self.levels.len() == 1 {
            return Ok((0, 0, 0.0));
        }
        let idx = self
            .levels
            .partition_point(|l| l.time <= t)
            .clamp(1, self.levels.len() - 1);
        let (a, b) = (idx - 1, idx);
        let (ta, tb) = (self.levels[a].time, self.levels[b].time);
        let w = if tb > ta {
            ((t - ta) / (tb - ta)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Ok((a, b, w))
    }

    /// Signal vector at `(x, t)`.
    pub fn value_at(&self, x: f64, t: f64) -> Result<Vec<f64>> {
        let (a, b, w) = self.bracket(t)?;
        let (la, lb) = (&self.levels[a], &self.levels[b]);
        Ok((0..la.num_components())
            .map(|i| {
                let va = la.grid.interp_cubic(&la.components[i], x);
                let vb = lb.grid.interp_cubic(&lb.components[i], x);
                (1.0 - w) * va + w * vb
            })
            .collect())
    }

    /// Spatial derivative vector at `(x, t)`.
    pub fn dx_at(&self, x: f64, t: f64) -> Result<Vec<f64>> {
        let (a, b, w) = self.bracket(t)?;
        let (la, lb) = (&self.levels[a], &self.levels[b]);
        Ok((0..la.num_components())
            .map(|i| {
                let va = la.grid.interp_cubic(&la.dx[i], x);
                let vb = lb.grid.interp_cubic(&lb.dx[i], x);
                (1.0 - w) * va + w * vb
            })
            .collect())
    }

    /// Temporal derivative vector at `(x, t)`.
    pub fn dt_at(&self, x: f64, t: f64) -> Result<Vec<f64>> {
        let (a, b, w) = self.bracket(t)?;
        let (la, lb) = (&self.levels[a], &self.levels[b]);
        Ok((0..la.num_components())
            .map(|i| {
                let va = la.grid.interp_cubic(&la.dt[i], x);
                let vb = lb.grid.interp_cubic(&lb.dt[i], x);
                (1.0 - w) * va + w * vb
            })
            .collect())
    }

    /// Response value `g(S(x, t))`.
    pub fn response_at(&self, x: f64, t: f64, g: &SignalResponse) -> Result<f64> {
        Ok(g.eval(&self.value_at(x, t)?))
    }
}

impl Default for SignalHistory {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params1(d: f64, k: f64, k0: f64) -> Vec<SignalComponent> {
        vec![SignalComponent {
            diffusion: d,
            production: k,
            decay: k0,
        }]
    }

    #[test]
    fn elliptic_uniform_density_gives_uniform_signal() {
        let grid = XGrid::new(10.0, 64);
        let op = SpectralOp::new(&grid);
        let params = params1(2.0, 3.0, 1.5);
        let n = vec![0.7; grid.n];
        let field = solve_elliptic(&n, &params, &grid, &op, 0.0).unwrap();
        for &s in &field.components[0] {
            assert_relative_eq!(s, 3.0 * 0.7 / 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn elliptic_single_mode_matches_analytic_solution() {
        let grid = XGrid::new(7.0, 128);
        let op = SpectralOp::new(&grid);
        let params = params1(1.0, 1.0, 1.0);
        let xi = 2.0 * std::f64::consts::PI / grid.length;
        let n: Vec<f64> = grid.nodes().iter().map(|&x| (xi * x).cos()).collect();
        let field = solve_elliptic(&n, &params, &grid, &op, 0.0).unwrap();
        let gain = 1.0 / (xi * xi + 1.0);
        for (i, &x) in grid.nodes().iter().enumerate() {
            assert_relative_eq!(
                field.components[0][i],
                gain * (xi * x).cos(),
                epsilon = 1e-10
            );
            assert_relative_eq!(
                field.dx[0][i],
                -gain * xi * (xi * x).sin(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn elliptic_is_linear_in_density() {
        let grid = XGrid::new(12.0, 96);
        let op = SpectralOp::new(&grid);
        let params = params1(0.8, 1.7, 0.9);
        let n1: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| (0.9 * x).sin().powi(2))
            .collect();
        let n2: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| ((x - 4.0) / 2.0).tanh() + 1.0)
            .collect();
        let (alpha, beta) = (0.6, -1.3);
        let combo: Vec<f64> = n1
            .iter()
            .zip(&n2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let fa = solve_elliptic(&n1, &params, &grid, &op, 0.0).unwrap();
        let fb = solve_elliptic(&n2, &params, &grid, &op, 0.0).unwrap();
        let fc = solve_elliptic(&combo, &params, &grid, &op, 0.0).unwrap();
        for i in 0..grid.n {
            let expect = alpha * fa.components[0][i] + beta * fb.components[0][i];
            assert_relative_eq!(fc.components[0][i], expect, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn elliptic_residual_is_tiny() {
        let grid = XGrid::new(20.0, 128);
        let op = SpectralOp::new(&grid);
        let params = params1(1.3, 0.9, 0.4);
        let n: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| (-(x - 10.0) * (x - 10.0) / 2.0).exp())
            .collect();
        let field = solve_elliptic(&n, &params, &grid, &op, 0.0).unwrap();
        assert!(elliptic_residual(&field, &n, &params, &op) < 1e-8);
    }

    #[test]
    fn parabolic_uniform_decay_is_exact_per_step() {
        let grid = XGrid::new(5.0, 32);
        let op = SpectralOp::new(&grid);
        let params = params1(1.0, 1.0, 0.8);
        let mut field = SignalField::zeros(&grid, 1, 0.0);
        field.components[0] = vec![2.0; grid.n];
        let n = vec![0.0; grid.n];
        let dt = 0.37;
        let stepped = step_parabolic(&field, &n, dt, &params, ReactionVariant::ProduceDegrade, &op)
            .unwrap();
        for &s in &stepped.components[0] {
            assert_relative_eq!(s, 2.0 * (-0.8 * dt).exp(), epsilon = 1e-14);
        }
    }

    #[test]
    fn parabolic_reaches_elliptic_steady_state_for_constant_density() {
        let grid = XGrid::new(5.0, 32);
        let op = SpectralOp::new(&grid);
        let params = params1(0.7, 2.0, 0.5);
        let mut field = SignalField::zeros(&grid, 1, 0.0);
        let n = vec![0.3; grid.n];
        let dt = 0.25;
        let steps = (20.0_f64 / 0.5 / dt).ceil() as usize;
        for _ in 0..steps {
            field =
                step_parabolic(&field, &n, dt, &params, ReactionVariant::ProduceDegrade, &op)
                    .unwrap();
        }
        let steady = 2.0 * 0.3 / 0.5;
        for &s in &field.components[0] {
            assert!((s - steady).abs() < 1e-8, "s = {s}, steady = {steady}");
        }
    }

    #[test]
    fn parabolic_mode_decay_factor() {
        let grid = XGrid::new(4.0, 64);
        let op = SpectralOp::new(&grid);
        let d = 0.9;
        let k0 = 0.6;
        let params = params1(d, 1.0, k0);
        let xi = 2.0 * std::f64::consts::PI * 3.0 / grid.length;
        let mut field = SignalField::zeros(&grid, 1, 0.0);
        field.components[0] = grid.nodes().iter().map(|&x| (xi * x).sin()).collect();
        let n = vec![0.0; grid.n];
        let dt = 0.05;
        let stepped = step_parabolic(&field, &n, dt, &params, ReactionVariant::ProduceDegrade, &op)
            .unwrap();
        let factor = (-(d * xi * xi + k0) * dt).exp();
        for (i, &x) in grid.nodes().iter().enumerate() {
            assert_relative_eq!(
                stepped.components[0][i],
                factor * (xi * x).sin(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn bound_report_zero_mass_zero_sup() {
        let params = params1(1.0, 1.0, 1.0);
        let bp = BoundParams {
            components: &params,
            max_speed: 1.0,
            mode: SignalMode::Elliptic,
            s0_sup: 0.0,
            s0_dx_sup: 0.0,
        };
        let report = signal_bound_report(0.0, 0.0, &bp).unwrap();
        assert_eq!(report.per_component[0].sup, 0.0);
    }

    #[test]
    fn bound_report_unit_norm_constants() {
        // k = d = k0 = 1, |n|_L1 = |n|_L2 = 1: the gradient bound is the
        // split-integral value ln(1 + 1) + sqrt(2).
        let params = params1(1.0, 1.0, 1.0);
        let bp = BoundParams {
            components: &params,
            max_speed: 1.0,
            mode: SignalMode::Elliptic,
            s0_sup: 0.0,
            s0_dx_sup: 0.0,
        };
        let report = signal_bound_report(1.0, 1.0, &bp).unwrap();
        assert_relative_eq!(
            report.per_component[0].dx,
            2.0_f64.ln() + std::f64::consts::SQRT_2,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            report.per_component[0].sup,
            std::f64::consts::PI,
            epsilon = 1e-14
        );
    }

    #[test]
    fn bounds_are_monotone_in_norms() {
        let params = params1(0.5, 2.0, 0.25);
        let bp = BoundParams {
            components: &params,
            max_speed: 2.0,
            mode: SignalMode::Elliptic,
            s0_sup: 0.0,
            s0_dx_sup: 0.0,
        };
        let mut prev = (0.0, 0.0, 0.0);
        for i in 0..20 {
            let n1 = 0.1 * i as f64;
            let n2 = 0.07 * i as f64;
            let r = signal_bound_report(n1, n2, &bp).unwrap();
            let cur = (
                r.per_component[0].sup,
                r.per_component[0].dx,
                r.per_component[0].dt.unwrap(),
            );
            assert!(cur.0 >= prev.0 && cur.1 >= prev.1 && cur.2 >= prev.2);
            prev = cur;
        }
    }

    #[test]
    fn nonnegative_density_gives_nonnegative_signal() {
        // Smooth nonnegative densities (sums of bumps) keep both solution
        // modes nonnegative up to roundoff.
        let grid = XGrid::new(20.0, 128);
        let op = SpectralOp::new(&grid);
        let params = params1(0.8, 1.5, 0.6);
        let mut state = 9000u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let centers: Vec<(f64, f64, f64)> =
                (0..4).map(|_| (20.0 * rnd(), 0.4 + rnd(), rnd())).collect();
            let n: Vec<f64> = grid
                .nodes()
                .iter()
                .map(|&x| {
                    centers
                        .iter()
                        .map(|&(c, w, a)| {
                            let d = grid.signed_distance(x, c);
                            a * (-d * d / (2.0 * w * w)).exp()
                        })
                        .sum::<f64>()
                })
                .collect();
            let peak = n.iter().cloned().fold(0.0f64, f64::max);
            let ell = solve_elliptic(&n, &params, &grid, &op, 0.0).unwrap();
            assert!(ell.components[0].iter().all(|&v| v >= -1e-12 * peak));

            let mut par = SignalField::zeros(&grid, 1, 0.0);
            for _ in 0..40 {
                par = step_parabolic(&par, &n, 0.1, &params, ReactionVariant::ProduceDegrade, &op)
                    .unwrap();
            }
            assert!(par.components[0].iter().all(|&v| v >= -1e-12 * peak));
        }
    }

    #[test]
    fn quasi_equilibrium_matches_elliptic_solution() {
        // d >> L^2 k0: the parabolic solution relaxes onto the elliptic
        // quasi-equilibrium within 2 percent relative sup norm.
        let grid = XGrid::new(10.0, 64);
        let op = SpectralOp::new(&grid);
        let d = 60.0 * grid.length * grid.length * 0.5;
        let params = params1(d, 1.0, 0.5);
        let n: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| {
                let dd = grid.signed_distance(x, 4.0);
                0.2 + (-dd * dd / 3.0).exp()
            })
            .collect();
        let ell = solve_elliptic(&n, &params, &grid, &op, 0.0).unwrap();
        let mut par = SignalField::zeros(&grid, 1, 0.0);
        let dt = 0.1;
        for _ in 0..((20.0_f64 / 0.5 / dt).ceil() as usize) {
            par = step_parabolic(&par, &n, dt, &params, ReactionVariant::ProduceDegrade, &op)
                .unwrap();
        }
        let sup_ref = ell.components[0].iter().cloned().fold(0.0f64, f64::max);
        let max_diff = ell.components[0]
            .iter()
            .zip(&par.components[0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_diff / sup_ref < 0.02,
            "relative gap {}",
            max_diff / sup_ref
        );
    }

    #[test]
    fn history_interpolates_linearly_in_time() {
        let grid = XGrid::new(6.0, 48);
        let mut a = SignalField::zeros(&grid, 1, 0.0);
        let mut b = SignalField::zeros(&grid, 1, 1.0);
        a.components[0] = vec![1.0; grid.n];
        b.components[0] = vec![3.0; grid.n];
        let mut hist = SignalHistory::new();
        hist.push(a);
        hist.push(b);
        let v = hist.value_at(2.0, 0.25).unwrap();
        assert_relative_eq!(v[0], 1.5, epsilon = 1e-12);
        assert!(hist.value_at(2.0, 2.0).is_err());
    }
}
