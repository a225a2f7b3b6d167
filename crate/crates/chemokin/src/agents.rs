//! Stochastic velocity-jump simulation: the independent oracle for the
//! deterministic solver.
//!
//! Each agent runs in a straight line, integrating its internal state with
//! the same exact affine integrator the characteristics module uses, and
//! reorients at Poisson events of rate `lambda(y1)`. Events are drawn by
//! thinning against a dominating rate `lambda_max`: candidates arrive at
//! rate `lambda_max` and are accepted with probability
//! `lambda(y1)/lambda_max`, which is exact in distribution (no `O(dt)`
//! turning bias to contaminate solver comparisons). `lambda_max` comes from
//! the validated growth bound over the internal-state box, so an acceptance
//! ratio above one at runtime is itself a violated-hypothesis report.
//!
//! Every agent owns a counter-based random stream, so trajectories are
//! bitwise reproducible for a fixed seed, independent of worker count.

use rayon::prelude::*;

use crate::characteristics::AffineFlow;
use crate::error::{ChemoError, Result};
use crate::grid::XGrid;
use crate::model::{KernelMatrix, ModelConfig};
use crate::rng::CounterRng;
use crate::signal::SignalHistory;

/// Monte Carlo population of `(x, v, y)` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEnsemble {
    pub x: Vec<f64>,
    pub v_idx: Vec<usize>,
    pub y: Vec<[f64; 2]>,
    pub streams: Vec<CounterRng>,
    pub time: f64,
    /// Physical mass represented by the whole population.
    pub mass: f64,
}

impl AgentEnsemble {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self, nv: usize, y_box: &crate::grid::YBox) -> Result<()> {
        if self.v_idx.iter().any(|&v| v >= nv) {
            return Err(ChemoError::Argument("agent velocity index out of range".into()));
        }
        if self.y.iter().any(|y| !y_box.contains(*y)) {
            return Err(ChemoError::Argument(
                "agent internal state outside the a priori box".into(),
            ));
        }
        Ok(())
    }
}

/// First accepted event of an inhomogeneous Poisson process on
/// `[t0, t0 + horizon)` by thinning against the constant rate `rate_max`.
pub fn thinning_first_event<F>(
    rng: &mut CounterRng,
    rate: F,
    rate_max: f64,
    t0: f64,
    horizon: f64,
) -> Result<Option<f64>>
where
    F: Fn(f64) -> f64,
{
    if rate_max <= 0.0 {
        return Ok(None);
    }
    let mut t = t0;
    loop {
        t += rng.exponential(rate_max);
        if t >= t0 + horizon {
            return Ok(None);
        }
        let r = rate(t);
        if r > rate_max * (1.0 + 1e-12) {
            return Err(ChemoError::ThinningBound {
                lambda: r,
                lambda_max: rate_max,
            });
        }
        if rng.uniform() * rate_max < r {
            return Ok(Some(t));
        }
    }
}

struct AgentScratch {
    x: f64,
    v_idx: usize,
    y: [f64; 2],
    rng: CounterRng,
}

fn advance_agent<E>(
    agent: &mut AgentScratch,
    t0: f64,
    dt: f64,
    cfg: &ModelConfig,
    kernel: &KernelMatrix,
    flow: &AffineFlow,
    history: &SignalHistory,
    lambda_max: f64,
    mut on_event: E,
) -> Result<()>
where
    E: FnMut(f64),
{
    let grid_len = cfg.domain_length;
    let mut t_local = 0.0;
    loop {
        let candidate = if lambda_max > 0.0 {
            agent.rng.exponential(lambda_max)
        } else {
            f64::INFINITY
        };
        let remaining = dt - t_local;
        let event_fires = candidate < remaining;
        let seg = if event_fires { candidate } else { remaining };
        if seg > 0.0 {
            let v = cfg.velocities.speeds[agent.v_idx];
            let t_start = t0 + t_local;
            let x_start = agent.x;
            agent.y = flow.flow_forced(agent.y, t_start, t_start + seg, |tau| {
                history.response_at(x_start + v * (tau - t_start), tau, &cfg.g)
            })?;
            agent.x = (x_start + v * seg).rem_euclid(grid_len);
            t_local += seg;
        }
        if !event_fires {
            break;
        }
        // Candidate event inside the step: accept by thinning.
        let lambda = cfg.lambda.eval(agent.y[0]);
        if lambda > lambda_max * (1.0 + 1e-12) {
            return Err(ChemoError::ThinningBound { lambda, lambda_max });
        }
        if agent.rng.uniform() * lambda_max < lambda {
            on_event(t0 + t_local);
            let weights: Vec<f64> = (0..cfg.velocities.len())
                .map(|vn| kernel.get(vn, agent.v_idx) * cfg.velocities.weights[vn])
                .collect();
            agent.v_idx = agent.rng.pick_weighted(&weights);
        }
    }
    Ok(())
}

/// Advances every agent by `dt` against the recorded signal history.
/// `lambda_max` must dominate the turning rate over the internal-state box
/// (see `validate_growth_conditions`).
pub fn step_agents(
    ens: &AgentEnsemble,
    history: &SignalHistory,
    dt: f64,
    cfg: &ModelConfig,
    lambda_max: f64,
) -> Result<AgentEnsemble> {
    if !(dt > 0.0) {
        return Err(ChemoError::Argument(format!("dt must be > 0, got {dt}")));
    }
    let kernel = KernelMatrix::materialize(&cfg.kernel, &cfg.velocities)?;
    let flow = AffineFlow::from_config(cfg);
    let t0 = ens.time;
    let updated: Result<Vec<AgentScratch>> = (0..ens.len())
        .into_par_iter()
        .map(|i| {
            let mut agent = AgentScratch {
                x: ens.x[i],
                v_idx: ens.v_idx[i],
                y: ens.y[i],
                rng: ens.streams[i],
            };
            advance_agent(
                &mut agent, t0, dt, cfg, &kernel, &flow, history, lambda_max, |_| {},
            )?;
            Ok(agent)
        })
        .collect();
    let updated = updated?;
    let mut out = ens.clone();
    for (i, a) in updated.into_iter().enumerate() {
        out.x[i] = a.x;
        out.v_idx[i] = a.v_idx;
        out.y[i] = a.y;
        out.streams[i] = a.rng;
    }
    out.time = t0 + dt;
    Ok(out)
}

/// Record of one agent's state at a dump time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub agent: usize,
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub y: [f64; 2],
    pub event: bool,
}

/// Advances a single agent while recording accepted event times; used by
/// trajectory dumps and the event-statistics tests.
#[allow(clippy::too_many_arguments)]
pub fn step_single_agent_recording(
    ens: &mut AgentEnsemble,
    index: usize,
    t0: f64,
    history: &SignalHistory,
    dt: f64,
    cfg: &ModelConfig,
    lambda_max: f64,
    events: &mut Vec<f64>,
) -> Result<()> {
    let kernel = KernelMatrix::materialize(&cfg.kernel, &cfg.velocities)?;
    let flow = AffineFlow::from_config(cfg);
    let mut agent = AgentScratch {
        x: ens.x[index],
        v_idx: ens.v_idx[index],
        y: ens.y[index],
        rng: ens.streams[index],
    };
    advance_agent(
        &mut agent,
        t0,
        dt,
        cfg,
        &kernel,
        &flow,
        history,
        lambda_max,
        |t| events.push(t),
    )?;
    ens.x[index] = agent.x;
    ens.v_idx[index] = agent.v_idx;
    ens.y[index] = agent.y;
    ens.streams[index] = agent.rng;
    Ok(())
}

/// Advances every agent like [`step_agents`] while recording one
/// trajectory sample per step for the first `record_first` agents (their
/// event flag reports whether any reorientation was accepted during the
/// step). Recorded agents follow the identical per-stream path they would
/// take in the plain stepper.
pub fn step_agents_recording(
    ens: &AgentEnsemble,
    history: &SignalHistory,
    dt: f64,
    cfg: &ModelConfig,
    lambda_max: f64,
    record_first: usize,
) -> Result<(AgentEnsemble, Vec<TrajectorySample>)> {
    if !(dt > 0.0) {
        return Err(ChemoError::Argument(format!("dt must be > 0, got {dt}")));
    }
    let kernel = KernelMatrix::materialize(&cfg.kernel, &cfg.velocities)?;
    let flow = AffineFlow::from_config(cfg);
    let t0 = ens.time;
    let k = record_first.min(ens.len());
    let mut out = ens.clone();
    let mut samples = Vec::with_capacity(k);
    for i in 0..k {
        let mut agent = AgentScratch {
            x: ens.x[i],
            v_idx: ens.v_idx[i],
            y: ens.y[i],
            rng: ens.streams[i],
        };
        let mut events = 0usize;
        advance_agent(
            &mut agent, t0, dt, cfg, &kernel, &flow, history, lambda_max, |_| events += 1,
        )?;
        out.x[i] = agent.x;
        out.v_idx[i] = agent.v_idx;
        out.y[i] = agent.y;
        out.streams[i] = agent.rng;
        samples.push(TrajectorySample {
            agent: i,
            t: t0 + dt,
            x: agent.x,
            v: cfg.velocities.speeds[agent.v_idx],
            y: agent.y,
            event: events > 0,
        });
    }
    let updated: Result<Vec<AgentScratch>> = (k..ens.len())
        .into_par_iter()
        .map(|i| {
            let mut agent = AgentScratch {
                x: ens.x[i],
                v_idx: ens.v_idx[i],
                y: ens.y[i],
                rng: ens.streams[i],
            };
            advance_agent(
                &mut agent, t0, dt, cfg, &kernel, &flow, history, lambda_max, |_| {},
            )?;
            Ok(agent)
        })
        .collect();
    for (offset, a) in updated?.into_iter().enumerate() {
        let i = k + offset;
        out.x[i] = a.x;
        out.v_idx[i] = a.v_idx;
        out.y[i] = a.y;
        out.streams[i] = a.rng;
    }
    out.time = t0 + dt;
    Ok((out, samples))
}

/// Histogram density estimate normalised so that `sum n h` equals the
/// ensemble mass; bins are centred on the grid nodes so the estimate is
/// comparable to nodal densities without a half-cell bias. Deterministic
/// accumulation order (agent index).
pub fn empirical_density(ens: &AgentEnsemble, grid: &XGrid) -> Vec<f64> {
    let mut counts = vec![0.0f64; grid.n];
    let h = grid.h();
    for &x in &ens.x {
        let bin = (grid.wrap(x) / h).round() as usize % grid.n;
        counts[bin] += 1.0;
    }
    let weight = if ens.is_empty() {
        0.0
    } else {
        ens.mass / (ens.len() as f64 * h)
    };
    counts.iter_mut().for_each(|c| *c *= weight);
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use crate::model::{
        KernelSpec, ReactionVariant, SignalComponent, SignalResponse, TurningRateSpec, VelocitySet,
    };
    use crate::signal::SignalField;
    use approx::assert_relative_eq;

    fn config(rate: f64) -> ModelConfig {
        ModelConfig {
            m: 2,
            excitation_time: 0.5,
            adaptation_time: 2.0,
            g: SignalResponse::Linear { coeffs: vec![0.0] },
            lambda: TurningRateSpec::Constant { rate },
            kernel: KernelSpec::Uniform,
            velocities: VelocitySet::symmetric_pair(1.0),
            signal: vec![SignalComponent {
                diffusion: 1.0,
                production: 1.0,
                decay: 1.0,
            }],
            reaction: ReactionVariant::ProduceDegrade,
            domain_length: 20.0,
            nx: 64,
            ny: [33, 33],
        }
    }

    fn zero_history(t_max: f64) -> SignalHistory {
        let grid = XGrid::new(20.0, 64);
        let mut h = SignalHistory::new();
        for k in 0..=2 {
            h.push(SignalField::zeros(&grid, 1, t_max * k as f64 / 2.0));
        }
        h
    }

    fn ensemble(n: usize, seed: u64) -> AgentEnsemble {
        let mut x = Vec::with_capacity(n);
        let mut v_idx = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut streams = Vec::with_capacity(n);
        for i in 0..n {
            let mut sampler = CounterRng::new(seed ^ 0xABCD, i as u64);
            x.push(20.0 * sampler.uniform());
            v_idx.push(if sampler.uniform() < 0.5 { 0 } else { 1 });
            y.push([0.0, 0.0]);
            streams.push(CounterRng::new(seed, i as u64));
        }
        AgentEnsemble {
            x,
            v_idx,
            y,
            streams,
            time: 0.0,
            mass: 1.0,
        }
    }

    #[test]
    fn zero_rate_gives_straight_lines() {
        let cfg = config(0.0);
        let hist = zero_history(5.0);
        let ens = ensemble(200, 7);
        let stepped = step_agents(&ens, &hist, 0.75, &cfg, 0.0).unwrap();
        for i in 0..ens.len() {
            let v = cfg.velocities.speeds[ens.v_idx[i]];
            let expect = (ens.x[i] + v * 0.75).rem_euclid(20.0);
            assert_relative_eq!(stepped.x[i], expect, epsilon = 1e-12);
            assert_eq!(stepped.v_idx[i], ens.v_idx[i]);
        }
    }

    #[test]
    fn count_is_conserved_and_density_mass_exact() {
        let cfg = config(1.3);
        let hist = zero_history(5.0);
        let mut ens = ensemble(5000, 13);
        let grid = XGrid::new(20.0, 64);
        for _ in 0..10 {
            ens = step_agents(&ens, &hist, 0.3, &cfg, 1.3).unwrap();
        }
        assert_eq!(ens.len(), 5000);
        let n = empirical_density(&ens, &grid);
        let mass: f64 = n.iter().sum::<f64>() * grid.h();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = config(2.0);
        let hist = zero_history(5.0);
        let a0 = ensemble(300, 42);
        let b0 = ensemble(300, 42);
        let a = step_agents(&a0, &hist, 1.0, &cfg, 2.0).unwrap();
        let b = step_agents(&b0, &hist, 1.0, &cfg, 2.0).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.v_idx, b.v_idx);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn mean_velocity_stays_in_clt_band() {
        let cfg = config(1.0);
        let hist = zero_history(20.0);
        let n = 20_000;
        let mut ens = ensemble(n, 99);
        for _ in 0..8 {
            ens = step_agents(&ens, &hist, 0.5, &cfg, 1.0).unwrap();
        }
        let mean_v: f64 = ens
            .v_idx
            .iter()
            .map(|&iv| cfg.velocities.speeds[iv])
            .sum::<f64>()
            / n as f64;
        let band = 4.0 / (n as f64).sqrt();
        assert!(mean_v.abs() < band, "mean v {mean_v} outside {band}");
    }

    fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        let mut d = 0.0f64;
        for (i, &s) in samples.iter().enumerate() {
            let f = cdf(s);
            d = d.max((f - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - f).abs());
        }
        d
    }

    #[test]
    fn constant_rate_run_durations_are_exponential() {
        // 1e4 inter-event times at constant rate; KS against the
        // exponential law at the 1% level.
        let rate = 1.7;
        let cfg = config(rate);
        let hist = zero_history(7000.0);
        let mut ens = ensemble(1, 1234);
        let mut events = Vec::new();
        let mut t = 0.0;
        while events.len() < 10_001 && t < 6900.0 {
            step_single_agent_recording(&mut ens, 0, t, &hist, 1.0, &cfg, rate, &mut events)
                .unwrap();
            t += 1.0;
        }
        assert!(events.len() > 10_000, "only {} events", events.len());
        let mut gaps: Vec<f64> = events.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.truncate(10_000);
        let d = ks_statistic(&mut gaps, |s| 1.0 - (-rate * s).exp());
        let d_crit = 1.628 / (gaps.len() as f64).sqrt(); // alpha = 0.01
        assert!(d < d_crit, "KS statistic {d} exceeds {d_crit}");
    }

    #[test]
    fn scripted_rate_matches_inversion_sampling() {
        // lambda(t) = 1 + sin t; compare thinned first-event times with the
        // inverse-transform law F(t) = 1 - exp(-Lambda(t)),
        // Lambda(t) = t + 1 - cos t.
        let rate = |t: f64| 1.0 + t.sin();
        let n = 10_000;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = CounterRng::new(2024, i as u64);
            if let Some(t) =
                thinning_first_event(&mut rng, rate, 2.0, 0.0, f64::INFINITY).unwrap()
            {
                samples.push(t);
            }
        }
        assert_eq!(samples.len(), n);
        let cdf = |t: f64| 1.0 - (-(t + 1.0 - t.cos())).exp();
        let d = ks_statistic(&mut samples, cdf);
        let d_crit = 1.628 / (n as f64).sqrt();
        assert!(d < d_crit, "KS statistic {d} exceeds {d_crit}");
    }

    #[test]
    fn thinning_bound_violation_is_an_error() {
        let cfg = config(3.0);
        let hist = zero_history(5.0);
        let ens = ensemble(50, 5);
        // lambda_max declared too small.
        let err = step_agents(&ens, &hist, 1.0, &cfg, 1.0);
        assert!(matches!(err, Err(ChemoError::ThinningBound { .. })));
    }

    #[test]
    fn uniform_agents_give_flat_histogram() {
        let grid = XGrid::new(20.0, 16);
        let n = 160_000;
        let mut ens = ensemble(n, 77);
        // Overwrite positions with an exactly uniform low-discrepancy fill.
        for (i, x) in ens.x.iter_mut().enumerate() {
            *x = 20.0 * ((i as f64 + 0.5) / n as f64);
        }
        let density = empirical_density(&ens, &grid);
        let expect = 1.0 / 20.0;
        let sigma = ((expect / grid.h()) / n as f64).sqrt(); // multinomial band
        for &d in &density {
            assert!((d - expect).abs() <= 4.0 * sigma.max(1e-12) + 1e-12);
        }
        let all_at_one: AgentEnsemble = {
            let mut e = ensemble(100, 3);
            e.x.iter_mut().for_each(|x| *x = 5.03);
            e
        };
        let spike = empirical_density(&all_at_one, &grid);
        let mass: f64 = spike.iter().sum::<f64>() * grid.h();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-12);
        assert_eq!(spike.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn constant_signal_agents_adapt() {
        let mut cfg = config(1.0);
        cfg.g = SignalResponse::Linear { coeffs: vec![1.0] };
        let grid = XGrid::new(20.0, 64);
        let mut hist = SignalHistory::new();
        for k in 0..=2 {
            let mut f = SignalField::zeros(&grid, 1, 25.0 * k as f64 / 2.0);
            f.components[0] = vec![1.5; grid.n];
            hist.push(f);
        }
        let mut ens = ensemble(500, 11);
        for y in ens.y.iter_mut() {
            *y = [1.0, 0.25];
        }
        let horizon = 10.0 * cfg.adaptation_time.max(cfg.excitation_time);
        let steps = 40;
        for _ in 0..steps {
            ens = step_agents(&ens, &hist, horizon / steps as f64, &cfg, 1.0).unwrap();
        }
        for y in &ens.y {
            assert!(y[0].abs() < 1e-3, "y1 = {}", y[0]);
            assert_relative_eq!(y[1], 1.5, epsilon = 1e-2);
        }
    }
}
