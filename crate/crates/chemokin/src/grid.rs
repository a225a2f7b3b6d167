//! Grids, interpolation and quadrature primitives.
//!
//! The spatial domain is the periodic interval `[0, L)` sampled at `nx`
//! uniform nodes. Internal states live on a rectangular box grid. Both use
//! 4-point Lagrange cubic interpolation; the variant used for transported
//! densities clips undershoots at the local minimum of the bracketing nodes,
//! which keeps nonnegative fields nonnegative without flattening smooth
//! extrema.

/// Periodic uniform grid on `[0, length)`.
#[derive(Debug, Clone, PartialEq)]
pub struct XGrid {
    pub length: f64,
    pub n: usize,
}

impl XGrid {
    pub fn new(length: f64, n: usize) -> Self {
        assert!(length > 0.0 && n >= 4, "degenerate x-grid");
        XGrid { length, n }
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.length / self.n as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Map x into `[0, length)`.
    #[inline]
    pub fn wrap(&self, x: f64) -> f64 {
        let r = x.rem_euclid(self.length);
        if r == self.length {
            0.0
        } else {
            r
        }
    }

    /// Signed periodic distance from `b` to `a`, in `[-L/2, L/2)`.
    #[inline]
    pub fn signed_distance(&self, a: f64, b: f64) -> f64 {
        let mut d = (a - b).rem_euclid(self.length);
        if d >= 0.5 * self.length {
            d -= self.length;
        }
        d
    }

    /// Cubic interpolation of periodic nodal `values` at position `x`.
    pub fn interp_cubic(&self, values: &[f64], x: f64) -> f64 {
        debug_assert_eq!(values.len(), self.n);
        let pos = self.wrap(x) / self.h();
        let base = pos.floor();
        let theta = pos - base;
        let i = base as usize % self.n;
        let w = lagrange_cubic_weights(theta);
        let n = self.n;
        let im1 = (i + n - 1) % n;
        let ip1 = (i + 1) % n;
        let ip2 = (i + 2) % n;
        w[0] * values[im1] + w[1] * values[i] + w[2] * values[ip1] + w[3] * values[ip2]
    }
}

/// Rectangular internal-state box `[lo1, hi1] x [lo2, hi2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl YBox {
    pub fn contains(&self, y: [f64; 2]) -> bool {
        y[0] >= self.lo[0] && y[0] <= self.hi[0] && y[1] >= self.lo[1] && y[1] <= self.hi[1]
    }

    pub fn inflated(&self, factor: f64) -> YBox {
        let c = [
            0.5 * (self.lo[0] + self.hi[0]),
            0.5 * (self.lo[1] + self.hi[1]),
        ];
        let half = [
            0.5 * (self.hi[0] - self.lo[0]) * factor,
            0.5 * (self.hi[1] - self.lo[1]) * factor,
        ];
        YBox {
            lo: [c[0] - half[0], c[1] - half[1]],
            hi: [c[0] + half[0], c[1] + half[1]],
        }
    }

    pub fn volume(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }
}

/// Node grid over a [`YBox`]; densities are assumed to vanish at and beyond
/// the box edges, so out-of-box interpolation reads zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct YGrid {
    pub bounds: YBox,
    pub n: [usize; 2],
}

impl YGrid {
    pub fn new(bounds: YBox, n: [usize; 2]) -> Self {
        assert!(n[0] >= 8 && n[1] >= 8, "y-grid too coarse");
        YGrid { bounds, n }
    }

    #[inline]
    pub fn h(&self, dim: usize) -> f64 {
        (self.bounds.hi[dim] - self.bounds.lo[dim]) / (self.n[dim] - 1) as f64
    }

    #[inline]
    pub fn node(&self, dim: usize, i: usize) -> f64 {
        self.bounds.lo[dim] + i as f64 * self.h(dim)
    }

    pub fn cell_volume(&self) -> f64 {
        self.h(0) * self.h(1)
    }
}

/// Lagrange cubic weights on the stencil `{-1, 0, 1, 2}` for offset
/// `theta` in `[0, 1)` past node 0. They sum to one for every `theta`.
#[inline]
pub fn lagrange_cubic_weights(theta: f64) -> [f64; 4] {
    let t = theta;
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t * t - 1.0) * (t - 2.0) / 2.0,
        -t * (t + 1.0) * (t - 2.0) / 2.0,
        t * (t * t - 1.0) / 6.0,
    ]
}

/// Cubic value with the transported-density undershoot clip: the result is
/// never below the smaller of the two bracketing nodes, so a nonnegative
/// field stays nonnegative. Returns `(value, clipped_amount >= 0)`.
#[inline]
pub fn clip_undershoot(raw: f64, left: f64, right: f64) -> (f64, f64) {
    let floor = left.min(right);
    if raw < floor {
        (floor, floor - raw)
    } else {
        (raw, 0.0)
    }
}

/// Deterministic sum: fixed-size blocks summed sequentially, block partials
/// folded in index order. The result is bitwise independent of how callers
/// parallelise over blocks.
pub const SUM_BLOCK: usize = 1024;

pub fn det_sum(values: &[f64]) -> f64 {
    let partials: Vec<f64> = values
        .chunks(SUM_BLOCK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    pairwise_fold(&partials)
}

fn pairwise_fold(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_fold(&xs[..mid]) + pairwise_fold(&xs[mid..])
        }
    }
}

/// Deterministic sum for per-block partials produced elsewhere (e.g. by a
/// parallel map); callers must pass them in block-index order.
pub fn fold_partials(partials: &[f64]) -> f64 {
    pairwise_fold(partials)
}

/// Composite Simpson on `n_intervals` uniform subintervals of `[a, b]`;
/// an odd count is completed with a 3/8 tail.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n_intervals: usize) -> f64 {
    assert!(n_intervals >= 2);
    let n_simpson = if n_intervals % 2 == 0 {
        n_intervals
    } else {
        n_intervals - 3
    };
    let h = (b - a) / n_intervals as f64;
    let mut total = 0.0;
    if n_simpson >= 2 {
        let mut acc = f(a) + f(a + n_simpson as f64 * h);
        for i in 1..n_simpson {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        total += acc * h / 3.0;
    }
    if n_simpson < n_intervals {
        // 3/8 rule on the last three subintervals.
        let x0 = a + n_simpson as f64 * h;
        total += 3.0 * h / 8.0 * (f(x0) + 3.0 * f(x0 + h) + 3.0 * f(x0 + 2.0 * h) + f(x0 + 3.0 * h));
    }
    total
}

/// Nodes and weights of 4-point Gauss-Legendre on `[-1, 1]`.
pub const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_26,
    0.339_981_043_584_856_26,
    0.861_136_311_594_052_6,
];
pub const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_85,
    0.652_145_154_862_546_2,
    0.652_145_154_862_546_2,
    0.347_854_845_137_453_85,
];

/// 4-point Gauss-Legendre quadrature of `f` over `[a, b]`.
pub fn gauss4<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in GL4_NODES.iter().zip(GL4_WEIGHTS.iter()) {
        acc += w * f(mid + half * x);
    }
    acc * half
}
