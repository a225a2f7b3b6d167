//! Model ingredients: internal dynamics, turning rate, turning kernel,
//! signal response, and the growth-hypothesis validator.
//!
//! The shipped internal dynamics is the two-variable excitation-adaptation
//! system
//!
//! ```text
//! dy1/dt = (g(S) - (y1 + y2)) / t_e
//! dy2/dt = (g(S) - y2) / t_a
//! ```
//!
//! with `y1` the fast response variable driving the turning rate and `y2`
//! the slow adaptation variable. For any constant signal, `y1 -> 0`: the
//! response adapts perfectly. The combined turning kernel is
//! `T(v, v', y) = lambda(y1) K(v, v')`; the discrete kernel must be doubly
//! stochastic so that the turning operator conserves mass exactly and keeps
//! velocity-uniform densities fixed.

use crate::error::{ChemoError, Result};

/// Internal-state vector (length `m`; the shipped model has `m = 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct InternalState(pub Vec<f64>);

impl InternalState {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.0.len() != m {
            return Err(ChemoError::Argument(format!(
                "internal state has length {}, model expects {m}",
                self.0.len()
            )));
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(ChemoError::Argument("internal state not finite".into()));
        }
        Ok(())
    }
}

/// Finite symmetric velocity set with positive quadrature weights.
///
/// The weights sum to the measure `|V|`; for atoms of weight one, a set of
/// two speeds has `|V| = 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySet {
    pub speeds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl VelocitySet {
    pub fn symmetric_pair(speed: f64) -> Self {
        VelocitySet {
            speeds: vec![-speed, speed],
            weights: vec![1.0, 1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    /// Total measure `|V|`.
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn max_speed(&self) -> f64 {
        self.speeds.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Checks symmetry (`v` in the set implies `-v` with equal weight),
    /// finiteness, and positive weights.
    pub fn validate(&self) -> Result<()> {
        if self.speeds.len() < 2 || self.speeds.len() != self.weights.len() {
            return Err(ChemoError::Argument(
                "velocity set needs >= 2 speeds with matching weights".into(),
            ));
        }
        if self
            .speeds
            .iter()
            .chain(self.weights.iter())
            .any(|v| !v.is_finite())
        {
            return Err(ChemoError::Argument("velocity set not finite".into()));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(ChemoError::Argument("velocity weights must be > 0".into()));
        }
        for (i, &v) in self.speeds.iter().enumerate() {
            let mirrored = self
                .speeds
                .iter()
                .position(|&u| (u + v).abs() <= 1e-12 * (1.0 + v.abs()));
            match mirrored {
                Some(j) if (self.weights[j] - self.weights[i]).abs() <= 1e-12 => {}
                _ => {
                    return Err(ChemoError::Argument(format!(
                        "velocity set not symmetric at v = {v}"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Turning-kernel specification; `tabulated` matrices are row-major and
/// indexed `(new velocity, old velocity)`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Uniform,
    Persistence { p_same: f64 },
    Tabulated { matrix: Vec<f64> },
}

/// Materialised kernel over a concrete velocity set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: Vec<f64>,
    nv: usize,
    /// Largest entry; the bounded-kernel constant `C_K`.
    pub c_k: f64,
}

impl KernelMatrix {
    /// Builds and validates the kernel: all entries nonnegative, weighted
    /// column sums one (normalisation over the new velocity) and weighted
    /// row sums one (required for exact discrete mass conservation).
    pub fn materialize(spec: &KernelSpec, velocities: &VelocitySet) -> Result<Self> {
        let nv = velocities.len();
        let entries = match spec {
            KernelSpec::Uniform => vec![1.0 / velocities.measure(); nv * nv],
            KernelSpec::Persistence { p_same } => {
                if !(0.0..=1.0).contains(p_same) {
                    return Err(ChemoError::Argument(format!(
                        "persistence probability {p_same} outside [0, 1]"
                    )));
                }
                if nv != 2 {
                    return Err(ChemoError::Argument(
                        "persistence kernel is defined for two velocities".into(),
                    ));
                }
                let w_ok = velocities.weights.iter().all(|&w| (w - 1.0).abs() <= 1e-12);
                if !w_ok {
                    return Err(ChemoError::Argument(
                        "persistence kernel requires unit velocity weights".into(),
                    ));
                }
                vec![*p_same, 1.0 - *p_same, 1.0 - *p_same, *p_same]
            }
            KernelSpec::Tabulated { matrix } => {
                if matrix.len() != nv * nv {
                    return Err(ChemoError::Argument(format!(
                        "tabulated kernel has {} entries, expected {}",
                        matrix.len(),
                        nv * nv
                    )));
                }
                matrix.clone()
            }
        };
        let k = KernelMatrix {
            c_k: entries.iter().fold(0.0_f64, |m, &e| m.max(e)),
            entries,
            nv,
        };
        k.check_stochastic(velocities)?;
        Ok(k)
    }

    fn check_stochastic(&self, velocities: &VelocitySet) -> Result<()> {
        if self.entries.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return Err(ChemoError::Argument("kernel entries must be >= 0".into()));
        }
        for old in 0..self.nv {
            let col: f64 = (0..self.nv)
                .map(|new| self.get(new, old) * velocities.weights[new])
                .sum();
            if (col - 1.0).abs() > 1e-12 {
                return Err(ChemoError::Argument(format!(
                    "kernel column {old} sums to {col}, expected 1"
                )));
            }
        }
        for new in 0..self.nv {
            let row: f64 = (0..self.nv)
                .map(|old| self.get(new, old) * velocities.weights[old])
                .sum();
            if (row - 1.0).abs() > 1e-12 {
                return Err(ChemoError::Argument(format!(
                    "kernel row {new} sums to {row}; a doubly stochastic kernel is required"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, v_new: usize, v_old: usize) -> f64 {
        self.entries[v_new * self.nv + v_old]
    }

    pub fn nv(&self) -> usize {
        self.nv
    }
}

/// Signal response `g`: a nonnegative scalar function of the signal vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalResponse {
    /// `g(S) = sum_i a_i S_i`, coefficients `a_i >= 0`.
    Linear { coeffs: Vec<f64> },
    /// `g(S) = sum_i a_i S_i / (1 + b_i S_i)`, saturating per component.
    Saturating { a: Vec<f64>, b: Vec<f64> },
}

impl SignalResponse {
    pub fn signal_dim(&self) -> usize {
        match self {
            SignalResponse::Linear { coeffs } => coeffs.len(),
            SignalResponse::Saturating { a, .. } => a.len(),
        }
    }

    /// Evaluates `g`; negative signal excursions (numerical undershoots)
    /// are treated as zero concentration.
    pub fn eval(&self, s: &[f64]) -> f64 {
        let g = match self {
            SignalResponse::Linear { coeffs } => coeffs
                .iter()
                .zip(s)
                .map(|(a, &si)| a * si.max(0.0))
                .sum::<f64>(),
            SignalResponse::Saturating { a, b } => a
                .iter()
                .zip(b)
                .zip(s)
                .map(|((ai, bi), &si)| {
                    let sp = si.max(0.0);
                    ai * sp / (1.0 + bi * sp)
                })
                .sum::<f64>(),
        };
        g.max(0.0)
    }

    /// Euclidean norm of the gradient, used by the growth validator.
    pub fn grad_norm(&self, s: &[f64]) -> f64 {
        match self {
            SignalResponse::Linear { coeffs } => {
                coeffs.iter().map(|a| a * a).sum::<f64>().sqrt()
            }
            SignalResponse::Saturating { a, b } => a
                .iter()
                .zip(b)
                .zip(s)
                .map(|((ai, bi), &si)| {
                    let d = ai / (1.0 + bi * si.max(0.0)).powi(2);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = match self {
            SignalResponse::Linear { coeffs } => coeffs.iter().all(|&a| a >= 0.0 && a.is_finite()),
            SignalResponse::Saturating { a, b } => {
                a.len() == b.len()
                    && a.iter().chain(b.iter()).all(|&x| x >= 0.0 && x.is_finite())
            }
        };
        if nonneg {
            Ok(())
        } else {
            Err(ChemoError::Argument(
                "signal response coefficients must be finite and >= 0".into(),
            ))
        }
    }
}

/// Turning-rate specification `lambda(y1)`, clipped to be nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub enum TurningRateSpec {
    Constant { rate: f64 },
    /// `max(0, base + slope * y1)`.
    ClippedLinear { base: f64, slope: f64 },
    /// `max(0, base + amplitude * y1 / (1 + |y1|))`; bounded by
    /// `base + |amplitude|`.
    Saturating { base: f64, amplitude: f64 },
}

impl TurningRateSpec {
    pub fn eval(&self, y1: f64) -> f64 {
        let raw = match self {
            TurningRateSpec::Constant { rate } => *rate,
            TurningRateSpec::ClippedLinear { base, slope } => base + slope * y1,
            TurningRateSpec::Saturating { base, amplitude } => {
                base + amplitude * y1 / (1.0 + y1.abs())
            }
        };
        raw.max(0.0)
    }

    /// Supremum of the rate over a `y1` interval (all variants are monotone
    /// between clip points, so it is attained at an endpoint or stays at the
    /// constant value).
    pub fn max_over(&self, lo: f64, hi: f64) -> f64 {
        self.eval(lo).max(self.eval(hi))
    }

    /// Bound on `|d lambda / d y1|`, used in the Psi growth check.
    pub fn slope_bound(&self) -> f64 {
        match self {
            TurningRateSpec::Constant { .. } => 0.0,
            TurningRateSpec::ClippedLinear { slope, .. } => slope.abs(),
            TurningRateSpec::Saturating { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let params_finite = match self {
            TurningRateSpec::Constant { rate } => rate.is_finite() && *rate >= 0.0,
            TurningRateSpec::ClippedLinear { base, slope } => base.is_finite() && slope.is_finite(),
            TurningRateSpec::Saturating { base, amplitude } => {
                base.is_finite() && amplitude.is_finite()
            }
        };
        if params_finite {
            Ok(())
        } else {
            Err(ChemoError::Argument("turning-rate parameters invalid".into()))
        }
    }
}

/// Reaction term acting on the extracellular signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReactionVariant {
    /// Cells produce the signal, which decays on its own:
    /// `R_i = k_i n - k_i^0 S_i`.
    ProduceDegrade,
    /// Cells consume the signal: `R_i = -k_i S_i n` (decay rate `k_i^0`
    /// still applies as autonomous degradation).
    Consume,
}

/// Per-component signal constants, all positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalComponent {
    pub diffusion: f64,
    pub production: f64,
    pub decay: f64,
}

/// Full model parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub m: usize,
    pub excitation_time: f64,
    pub adaptation_time: f64,
    pub g: SignalResponse,
    pub lambda: TurningRateSpec,
    pub kernel: KernelSpec,
    pub velocities: VelocitySet,
    pub signal: Vec<SignalComponent>,
    pub reaction: ReactionVariant,
    pub domain_length: f64,
    pub nx: usize,
    pub ny: [usize; 2],
}

impl ModelConfig {
    pub fn signal_dim(&self) -> usize {
        self.signal.len()
    }

    /// `|div_y F| = 1/t_e + 1/t_a` for the shipped dynamics.
    pub fn div_f_magnitude(&self) -> f64 {
        1.0 / self.excitation_time + 1.0 / self.adaptation_time
    }

    pub fn validate(&self) -> Result<()> {
        if self.m != 2 {
            return Err(ChemoError::Argument(
                "the shipped excitation-adaptation model has m = 2".into(),
            ));
        }
        if !(self.excitation_time > 0.0 && self.adaptation_time > 0.0) {
            return Err(ChemoError::Argument("t_e and t_a must be > 0".into()));
        }
        for (i, c) in self.signal.iter().enumerate() {
            if !(c.diffusion > 0.0 && c.production > 0.0 && c.decay > 0.0) {
                return Err(ChemoError::Argument(format!(
                    "signal component {i}: d, k, k0 must be > 0"
                )));
            }
        }
        if self.g.signal_dim() != self.signal.len() {
            return Err(ChemoError::Argument(
                "signal response dimension differs from signal component count".into(),
            ));
        }
        self.g.validate()?;
        self.lambda.validate()?;
        self.velocities.validate()?;
        KernelMatrix::materialize(&self.kernel, &self.velocities)?;
        Ok(())
    }
}

/// Right-hand side of the excitation-adaptation dynamics at one point.
pub fn cartoon_rhs(s_value: &[f64], y: &InternalState, cfg: &ModelConfig) -> Result<[f64; 2]> {
    y.validate(2)?;
    let g = cfg.g.eval(s_value);
    if !g.is_finite() {
        return Err(ChemoError::ModelEval(format!(
            "signal response produced {g} at S = {s_value:?}"
        )));
    }
    let (y1, y2) = (y.0[0], y.0[1]);
    Ok([
        (g - (y1 + y2)) / cfg.excitation_time,
        (g - y2) / cfg.adaptation_time,
    ])
}

/// Turning rate at the given response value; always finite and >= 0.
pub fn turning_rate(y1: f64, cfg: &ModelConfig) -> f64 {
    cfg.lambda.eval(y1)
}

/// Kernel entry for a reorientation from `v_old` to `v_new`.
pub fn turning_kernel(v_new: usize, v_old: usize, kernel: &KernelMatrix) -> f64 {
    kernel.get(v_new, v_old)
}

/// Combined kernel `T = lambda(y1) K(v_new, v_old)`.
pub fn combined_kernel(
    v_new: usize,
    v_old: usize,
    y: &InternalState,
    kernel: &KernelMatrix,
    cfg: &ModelConfig,
) -> Result<f64> {
    y.validate(cfg.m)?;
    Ok(turning_rate(y.0[0], cfg) * kernel.get(v_new, v_old))
}

/// Total signal derivative seen by a cell moving with velocity `v`:
/// `dC/dt = v dS/dx + dS/dt`, componentwise.
pub fn signal_derivative_along_trajectory(v: f64, grad_s: &[f64], dt_s: &[f64]) -> Vec<f64> {
    grad_s
        .iter()
        .zip(dt_s)
        .map(|(gx, gt)| v * gx + gt)
        .collect()
}

// ---------------------------------------------------------------------------
// Growth hypotheses
// ---------------------------------------------------------------------------

/// Nondecreasing nonnegative comparison function.
#[derive(Debug, Clone, PartialEq)]
pub enum MonotoneFn {
    Constant { c: f64 },
    /// `a + b r`
    Affine { a: f64, b: f64 },
    /// `c (1 + r^p)`
    Power { c: f64, p: f64 },
    /// `a r / (1 + b r) + a` (bounded by `a/b + a`)
    SaturatingLinear { a: f64, b: f64 },
    /// Piecewise-linear table over increasing sample points, clamped at the
    /// ends.
    Tabulated { points: Vec<(f64, f64)> },
}

impl MonotoneFn {
    pub fn eval(&self, r: f64) -> f64 {
        let r = r.max(0.0);
        match self {
            MonotoneFn::Constant { c } => *c,
            MonotoneFn::Affine { a, b } => a + b * r,
            MonotoneFn::Power { c, p } => c * (1.0 + r.powf(*p)),
            MonotoneFn::SaturatingLinear { a, b } => a * r / (1.0 + b * r) + a,
            MonotoneFn::Tabulated { points } => {
                if points.is_empty() {
                    return 0.0;
                }
                if r <= points[0].0 {
                    return points[0].1;
                }
                for w in points.windows(2) {
                    if r <= w[1].0 {
                        let t = (r - w[0].0) / (w[1].0 - w[0].0);
                        return w[0].1 + t * (w[1].1 - w[0].1);
                    }
                }
                points[points.len() - 1].1
            }
        }
    }
}

/// Comparison functions and constants of the growth hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthSpec {
    /// Bounds `|g| + |grad g|`.
    pub phi: MonotoneFn,
    /// Bounds `|T| + |grad T|` as a function of `|y|`.
    pub psi: MonotoneFn,
    /// The signal-magnitude term in the turning-rate growth estimate.
    pub lambda_growth: MonotoneFn,
    /// Bounds the divergence of the internal dynamics.
    pub pi: MonotoneFn,
    pub omega: f64,
    pub sigma: f64,
    pub gamma: f64,
    /// `|y1| <= c_y (1 + |dC/dt|^omega)`.
    pub c_y: f64,
    /// `lambda(y1) <= c_poly (1 + |y1|^sigma)`.
    pub c_poly: f64,
    /// `lambda(y1) <= c_lambda (1 + Lambda(|C|) + |dC/dt|)`.
    pub c_lambda: f64,
    /// `|div_y F| <= c_div (1 + Pi(|z|))`.
    pub c_div: f64,
}

/// Sampling ranges for the hypothesis validator.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub s_abs_max: f64,
    pub dcdt_abs_max: f64,
    pub y_box: crate::grid::YBox,
    pub samples_per_axis: usize,
}

impl SampleBox {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_axis < 2
            || !(self.s_abs_max >= 0.0)
            || !(self.dcdt_abs_max >= 0.0)
            || self.y_box.volume() <= 0.0
        {
            return Err(ChemoError::Argument("empty or degenerate sample box".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisCheck {
    pub id: &'static str,
    pub passed: bool,
    /// Failure witness: location, left-hand side, right-hand side.
    pub witness: Option<(String, f64, f64)>,
}

/// Existence regimes a configuration can satisfy, named by the route
/// that establishes them: the simplified transduction model with the
/// parabolic signal, the general turning-rate growth estimate with the
/// elliptic signal, the exponent-product route, and the bounded-rate
/// regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    SimplifiedParabolic,
    GeneralElliptic,
    ExponentRoute,
    BoundedRate,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::SimplifiedParabolic => "simplified-parabolic",
            Regime::GeneralElliptic => "general-elliptic",
            Regime::ExponentRoute => "exponent-route",
            Regime::BoundedRate => "bounded-rate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<HypothesisCheck>,
    pub regimes: Vec<Regime>,
    /// Bounded-kernel constant observed on the materialised kernel.
    pub c_k: f64,
    /// Supremum of the turning rate over the sampled `y1` range.
    pub lambda_max: f64,
}

impl ValidationReport {
    pub fn passed(&self, id: &str) -> bool {
        self.checks.iter().any(|c| c.id == id && c.passed)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Evaluates every growth hypothesis on a deterministic sample grid and
/// reports which existence regimes the configuration satisfies.
pub fn validate_growth_conditions(
    cfg: &ModelConfig,
    gs: &GrowthSpec,
    sample_box: &SampleBox,
) -> Result<ValidationReport> {
    sample_box.validate()?;
    let kernel = KernelMatrix::materialize(&cfg.kernel, &cfg.velocities)?;
    let nq = sample_box.samples_per_axis;
    let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (nq - 1) as f64;

    let mut checks = Vec::new();
    let mut check = |id: &'static str, mut fail: Option<(String, f64, f64)>, passed: bool| {
        if passed {
            fail = None;
        }
        checks.push(HypothesisCheck {
            id,
            passed,
            witness: fail,
        });
    };

    // Comparison functions must be nonnegative and nondecreasing on the
    // sampled range.
    for (name, f, range) in [
        ("phi-monotone", &gs.phi, sample_box.s_abs_max),
        ("psi-monotone", &gs.psi, y_norm_max(&sample_box.y_box)),
        ("lambda-fn-monotone", &gs.lambda_growth, sample_box.s_abs_max),
        ("pi-monotone", &gs.pi, sample_box.s_abs_max),
    ] {
        let mut ok = true;
        let mut witness = None;
        let mut prev = f.eval(0.0);
        if prev < 0.0 {
            ok = false;
            witness = Some(("r = 0".into(), prev, 0.0));
        }
        for i in 1..nq {
            let r = lin(0.0, range.max(1e-12), i);
            let v = f.eval(r);
            if v < 0.0 || v + 1e-12 * (1.0 + v.abs()) < prev {
                ok = false;
                witness = Some((format!("r = {r}"), v, prev));
                break;
            }
            prev = v;
        }
        check(name, witness, ok);
    }

    // Kernel bound (the finite matrix maximum always yields a valid C_K).
    check("kernel-bounded", None, kernel.c_k.is_finite());

    // lambda >= 0 and its supremum over the sampled y1 range.
    let y1_lo = sample_box.y_box.lo[0];
    let y1_hi = sample_box.y_box.hi[0];
    let mut lambda_max: f64 = 0.0;
    {
        let mut ok = true;
        let mut witness = None;
        for i in 0..nq {
            let y1 = lin(y1_lo, y1_hi, i);
            let l = turning_rate(y1, cfg);
            lambda_max = lambda_max.max(l);
            if !(l >= 0.0 && l.is_finite()) {
                ok = false;
                witness = Some((format!("y1 = {y1}"), l, 0.0));
                break;
            }
        }
        check("lambda-nonnegative", witness, ok);
    }
    lambda_max = lambda_max.max(cfg.lambda.max_over(y1_lo, y1_hi));

    // Phi dominates |g| + |grad g| over the signal range (sampled on the
    // diagonal |S_i| = r/sqrt(M) and on single-component rays).
    {
        let m_sig = cfg.signal_dim();
        let mut ok = true;
        let mut witness = None;
        'phi: for i in 0..nq {
            let r = lin(0.0, sample_box.s_abs_max, i);
            let mut rays = vec![vec![r / (m_sig as f64).sqrt(); m_sig]];
            for c in 0..m_sig {
                let mut s = vec![0.0; m_sig];
                s[c] = r;
                rays.push(s);
            }
            for s in rays {
                let lhs = cfg.g.eval(&s) + cfg.g.grad_norm(&s);
                let rhs = gs.phi.eval(r);
                if lhs > rhs + 1e-12 * (1.0 + rhs) {
                    ok = false;
                    witness = Some((format!("|S| = {r}"), lhs, rhs));
                    break 'phi;
                }
            }
        }
        check("growth-phi", witness, ok);
    }

    // Psi dominates |T| + |grad T| = K (lambda + |lambda'|) over the y box.
    {
        let mut ok = true;
        let mut witness = None;
        'psi: for i in 0..nq {
            for j in 0..nq {
                let y1 = lin(y1_lo, y1_hi, i);
                let y2 = lin(sample_box.y_box.lo[1], sample_box.y_box.hi[1], j);
                let ynorm = (y1 * y1 + y2 * y2).sqrt();
                let lhs = kernel.c_k * (turning_rate(y1, cfg) + cfg.lambda.slope_bound());
                let rhs = gs.psi.eval(ynorm);
                if lhs > rhs + 1e-12 * (1.0 + rhs) {
                    ok = false;
                    witness = Some((format!("y = ({y1}, {y2})"), lhs, rhs));
                    break 'psi;
                }
            }
        }
        check("growth-psi", witness, ok);
    }

    // Direct turning-rate growth estimate, checked in its conservative
    // samplable form: sup lambda over the box must be covered with the
    // signal-change term at its sampled minimum (zero).
    {
        let rhs = gs.c_lambda * (1.0 + gs.lambda_growth.eval(0.0));
        let ok = lambda_max <= rhs + 1e-12 * (1.0 + rhs);
        check(
            "growth-lambda",
            Some(("sup lambda over y1 range".into(), lambda_max, rhs)),
            ok,
        );
    }

    // Exponent route: omega*sigma <= 1, lambda <= c_poly (1 + |y1|^sigma),
    // and the sampled y1 range must fit the state bound constant c_y.
    {
        let exp_ok = gs.omega * gs.sigma <= 1.0 + 1e-12;
        let mut poly_ok = true;
        let mut witness = None;
        for i in 0..nq {
            let y1 = lin(y1_lo, y1_hi, i);
            let lhs = turning_rate(y1, cfg);
            let rhs = gs.c_poly * (1.0 + y1.abs().powf(gs.sigma));
            if lhs > rhs + 1e-12 * (1.0 + rhs) {
                poly_ok = false;
                witness = Some((format!("y1 = {y1}"), lhs, rhs));
                break;
            }
        }
        let range_ok = y1_lo.abs().max(y1_hi.abs()) <= gs.c_y + 1e-12;
        if !exp_ok {
            witness = Some(("omega*sigma".into(), gs.omega * gs.sigma, 1.0));
        } else if poly_ok && !range_ok {
            witness = Some((
                "y1 range vs c_y".into(),
                y1_lo.abs().max(y1_hi.abs()),
                gs.c_y,
            ));
        }
        check("growth-y-lambda", witness, exp_ok && poly_ok && range_ok);
    }

    // T <= C_K lambda at every sampled kernel entry and y1.
    {
        let mut ok = true;
        let mut witness = None;
        'gt: for i in 0..nq {
            let y1 = lin(y1_lo, y1_hi, i);
            let l = turning_rate(y1, cfg);
            for vn in 0..kernel.nv() {
                for vo in 0..kernel.nv() {
                    let t = l * kernel.get(vn, vo);
                    let bound = kernel.c_k * l;
                    if t > bound + 1e-12 * (1.0 + bound) {
                        ok = false;
                        witness = Some((format!("y1 = {y1}, K({vn},{vo})"), t, bound));
                        break 'gt;
                    }
                }
            }
        }
        check("growth-t", witness, ok);
    }

    // |div_y F| <= c_div (1 + Pi(|z|)); the shipped dynamics has constant
    // divergence -(1/t_e + 1/t_a).
    {
        let div = cfg.div_f_magnitude();
        let rhs = gs.c_div * (1.0 + gs.pi.eval(0.0));
        let ok = div <= rhs + 1e-12 * (1.0 + rhs);
        check("div-f-bounded", Some(("|div_y F|".into(), div, rhs)), ok);
    }

    // Signed divergence route: div_y F <= 0 plus polynomial control and
    // omega*gamma <= 1.
    {
        let exp_ok = gs.omega * gs.gamma <= 1.0 + 1e-12;
        let signed_ok = true; // div_y F = -(1/t_e + 1/t_a) < 0 identically.
        check(
            "div-f-signed",
            Some(("omega*gamma".into(), gs.omega * gs.gamma, 1.0)),
            exp_ok && signed_ok,
        );
    }

    // lambda bounded by a constant over the sampled range (with T <= C_K
    // lambda this is the bounded-rate regime).
    {
        let rhs = gs.c_lambda * (1.0 + gs.lambda_growth.eval(0.0));
        let ok = lambda_max.is_finite() && lambda_max <= rhs + 1e-12 * (1.0 + rhs);
        check(
            "lambda-bounded",
            Some(("sup lambda".into(), lambda_max, rhs)),
            ok,
        );
    }

    let passed = |id: &str| checks.iter().any(|c| c.id == id && c.passed);
    let mut regimes = Vec::new();
    if passed("growth-phi") && passed("growth-psi") {
        regimes.push(Regime::SimplifiedParabolic);
    }
    if passed("growth-lambda") && passed("growth-t") && passed("div-f-bounded") {
        regimes.push(Regime::GeneralElliptic);
    }
    if passed("growth-y-lambda") && passed("growth-t") && passed("div-f-signed") {
        regimes.push(Regime::ExponentRoute);
    }
    if passed("lambda-bounded")
        && passed("growth-t")
        && (passed("div-f-bounded") || passed("div-f-signed"))
    {
        regimes.push(Regime::BoundedRate);
    }

    Ok(ValidationReport {
        checks,
        regimes,
        c_k: kernel.c_k,
        lambda_max,
    })
}

fn y_norm_max(b: &crate::grid::YBox) -> f64 {
    let y1 = b.lo[0].abs().max(b.hi[0].abs());
    let y2 = b.lo[1].abs().max(b.hi[1].abs());
    (y1 * y1 + y2 * y2).sqrt()
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn kernel_normalisation_holds_for_random_persistence(p in 0.0f64..=1.0) {
            let v = VelocitySet::symmetric_pair(1.0);
            let k = KernelMatrix::materialize(&KernelSpec::Persistence { p_same: p }, &v).unwrap();
            for old in 0..2 {
                let col: f64 = (0..2).map(|new| k.get(new, old) * v.weights[new]).sum();
                prop_assert!((col - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn turning_rate_is_clipped_nonnegative(
            base in -5.0f64..5.0,
            slope in -5.0f64..5.0,
            y1 in -100.0f64..100.0,
        ) {
            let spec = TurningRateSpec::ClippedLinear { base, slope };
            prop_assert!(spec.eval(y1) >= 0.0);
        }

        #[test]
        fn combined_kernel_obeys_bounded_growth(
            rate in 0.0f64..10.0,
            p in 0.0f64..=1.0,
            y1 in -10.0f64..10.0,
        ) {
            let mut cfg = tests::test_config();
            cfg.lambda = TurningRateSpec::Constant { rate };
            cfg.kernel = KernelSpec::Persistence { p_same: p };
            let kernel = KernelMatrix::materialize(&cfg.kernel, &cfg.velocities).unwrap();
            let y = InternalState(vec![y1, 0.0]);
            for vn in 0..2 {
                for vo in 0..2 {
                    let t = combined_kernel(vn, vo, &y, &kernel, &cfg).unwrap();
                    prop_assert!(t <= kernel.c_k * turning_rate(y1, &cfg) + 1e-12);
                }
            }
        }
    }
}
