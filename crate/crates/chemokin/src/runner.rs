//! Scenario orchestration and file output.
//!
//! Four run modes: a deterministic kinetic run, a stochastic agent run, a
//! comparison run (kinetic first, recording the signal history, then the
//! agents replay against the same history so both solve the same system),
//! and a monitor-only pass that rebuilds the bound ledger from a recorded
//! moment series.
//!
//! Every output file starts with a `# config_sha256 = ...` line; CSV
//! numbers are written with 17 significant digits so parsing them back is
//! exact. Reductions and parallel sweeps are deterministic, so two runs
//! with the same configuration and seed produce byte-identical CSV files
//! regardless of the worker count.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::agents::{
    empirical_density, step_agents, step_agents_recording, AgentEnsemble, TrajectorySample,
};
use crate::characteristics::{jacobian_det_general, trace_characteristic, CharacteristicTrace};
use crate::config::{
    Coupling, InitialSignal, LoadedScenario, RunMode, ScenarioConfig, XProfile,
};
use crate::error::{ChemoError, Result};
use crate::grid::{fold_partials, XGrid, YGrid};
use crate::kinetic::{density_and_flux, step_kinetic, Moments, PhaseSpaceField};
use crate::monitor::{
    check_parabolic_bounds, check_signal_bounds, check_elliptic_bounds, concentration_metrics,
    BoundLedger, EnvelopeConstants, MomentSample,
};
use crate::rng::CounterRng;
use crate::signal::{
    fill_dt_from_flux, signal_bound_report, solve_elliptic, step_parabolic, BoundParams,
    BoundReport, SignalField, SignalHistory, SignalMode, SpectralOp,
};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: RunMode,
    pub steps: usize,
    pub recorded_rows: usize,
    pub final_mass: f64,
    pub mass_drift: f64,
    pub violations: usize,
    pub clipped_mass_total: f64,
    pub compare_max_l1: Option<f64>,
    pub wall_seconds: f64,
    pub out_dir: PathBuf,
}

fn effective_workers(configured: usize) -> usize {
    if configured > 0 {
        return configured;
    }
    std::env::var("CHEMOKIN_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or(1)
}

/// Executes the scenario and writes all outputs into `out_dir`.
pub fn run_scenario(loaded: &LoadedScenario, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir)?;
    let workers = effective_workers(loaded.config.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ChemoError::Argument(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_inner(loaded, out_dir))
}

fn run_inner(loaded: &LoadedScenario, out_dir: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    let mut summary = match loaded.config.mode {
        RunMode::Kinetic => kinetic_run(loaded, out_dir, false)?.0,
        RunMode::Compare => {
            let (mut s, ctx) = kinetic_run(loaded, out_dir, true)?;
            let ctx = ctx.expect("compare run records context");
            let max_l1 = agent_compare_phase(loaded, out_dir, &ctx)?;
            s.compare_max_l1 = Some(max_l1);
            s
        }
        RunMode::Agent => agent_run(loaded, out_dir)?,
        RunMode::Monitor => monitor_run(loaded, out_dir)?,
    };
    summary.wall_seconds = start.elapsed().as_secs_f64();
    write_summary(loaded, out_dir, &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Initial data
// ---------------------------------------------------------------------------

/// Nodal values of the initial spatial profile, normalised to unit discrete
/// integral.
pub fn initial_density_profile(cfg: &ScenarioConfig, grid: &XGrid) -> Vec<f64> {
    let mut rho: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| match &cfg.initial.x_profile {
            XProfile::Gaussian {
                center,
                sigma,
                support,
            } => {
                let d = grid.signed_distance(x, *center);
                if d.abs() <= *support {
                    (-d * d / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                }
            }
            XProfile::Box { lo, hi } => {
                if x >= *lo && x < *hi {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    let total: f64 = rho.iter().sum::<f64>() * grid.h();
    if total > 0.0 {
        rho.iter_mut().for_each(|v| *v /= total);
    }
    rho
}

fn initial_y_profile(cfg: &ScenarioConfig, grid: &YGrid) -> Vec<f64> {
    let (n1, n2) = (grid.n[0], grid.n[1]);
    let c = cfg.initial.y_center;
    let s = cfg.initial.y_sigma;
    let w = cfg.initial.y_support;
    let mut rho = vec![0.0; n1 * n2];
    for i1 in 0..n1 {
        let y1 = grid.node(0, i1);
        for i2 in 0..n2 {
            let y2 = grid.node(1, i2);
            let d1 = y1 - c[0];
            let d2 = y2 - c[1];
            if d1.abs() <= w[0] && d2.abs() <= w[1] {
                rho[i1 * n2 + i2] = (-d1 * d1 / (2.0 * s[0] * s[0])
                    - d2 * d2 / (2.0 * s[1] * s[1]))
                    .exp();
            }
        }
    }
    let total: f64 = rho.iter().sum::<f64>() * grid.cell_volume();
    if total > 0.0 {
        rho.iter_mut().for_each(|v| *v /= total);
    }
    rho
}

/// Builds the separable initial phase-space density with exact discrete
/// mass.
pub fn build_initial_field(cfg: &ScenarioConfig) -> PhaseSpaceField {
    let x_grid = XGrid::new(cfg.model.domain_length, cfg.model.nx);
    let y_grid = YGrid::new(cfg.state_box, cfg.model.ny);
    let rho_x = initial_density_profile(cfg, &x_grid);
    let rho_y = initial_y_profile(cfg, &y_grid);
    let vw = &cfg.initial.v_weights;
    let denom: f64 = vw
        .iter()
        .zip(&cfg.model.velocities.weights)
        .map(|(q, w)| q * w)
        .sum();
    let n2 = y_grid.n[1];
    let mass = cfg.initial.mass;
    let mut field = PhaseSpaceField::zeros(
        x_grid,
        cfg.model.velocities.speeds.clone(),
        cfg.model.velocities.weights.clone(),
        y_grid,
        0.0,
    );
    let (nx, nv, ny1, ny2) = field.dims();
    for ix in 0..nx {
        for iv in 0..nv {
            let q = vw[iv] / denom;
            for i1 in 0..ny1 {
                for i2 in 0..ny2 {
                    field.set(ix, iv, i1, i2, mass * rho_x[ix] * q * rho_y[i1 * n2 + i2]);
                }
            }
        }
    }
    field
}

/// Samples the agent population from the same separable profiles.
pub fn sample_ensemble(cfg: &ScenarioConfig, n_agents: usize) -> AgentEnsemble {
    let seed = cfg.seed;
    let length = cfg.model.domain_length;
    let mut x = Vec::with_capacity(n_agents);
    let mut v_idx = Vec::with_capacity(n_agents);
    let mut y = Vec::with_capacity(n_agents);
    let mut streams = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let mut s = CounterRng::new(seed ^ 0x5EED_5A3B, i as u64);
        let xi = match &cfg.initial.x_profile {
            XProfile::Gaussian {
                center,
                sigma,
                support,
            } => loop {
                let cand = center + sigma * s.normal();
                if (cand - center).abs() <= *support {
                    break cand.rem_euclid(length);
                }
            },
            XProfile::Box { lo, hi } => lo + (hi - lo) * s.uniform(),
        };
        let iv = s.pick_weighted(&cfg.initial.v_weights);
        let mut yy = [0.0; 2];
        for d in 0..2 {
            yy[d] = loop {
                let cand = cfg.initial.y_center[d] + cfg.initial.y_sigma[d] * s.normal();
                if (cand - cfg.initial.y_center[d]).abs() <= cfg.initial.y_support[d] {
                    break cand;
                }
            };
        }
        x.push(xi);
        v_idx.push(iv);
        y.push(yy);
        streams.push(CounterRng::new(seed, i as u64));
    }
    AgentEnsemble {
        x,
        v_idx,
        y,
        streams,
        time: 0.0,
        mass: cfg.initial.mass,
    }
}

// ---------------------------------------------------------------------------
// Kinetic run
// ---------------------------------------------------------------------------

/// Everything the agent comparison phase needs from the kinetic phase.
pub struct CompareContext {
    pub history: SignalHistory,
    pub densities: Vec<(f64, Vec<f64>)>,
}

fn signal_from_initial(
    cfg: &ScenarioConfig,
    grid: &XGrid,
    op: &SpectralOp,
    n0: &[f64],
    flux0: &[f64],
) -> Result<SignalField> {
    match (&cfg.initial.s0, cfg.signal_mode) {
        (InitialSignal::Elliptic, _) => {
            let mut s = solve_elliptic(n0, &cfg.model.signal, grid, op, 0.0)?;
            fill_dt_from_flux(&mut s, flux0, &cfg.model.signal, op);
            Ok(s)
        }
        (InitialSignal::Uniform(values), _) => {
            let mut s = SignalField::zeros(grid, cfg.model.signal_dim(), 0.0);
            for (c, &v) in values.iter().enumerate() {
                s.components[c] = vec![v; grid.n];
            }
            fill_parabolic_derivatives(&mut s, n0, cfg, op);
            Ok(s)
        }
        (
            InitialSignal::Gaussian {
                amplitude,
                center,
                sigma,
            },
            _,
        ) => {
            let mut s = SignalField::zeros(grid, cfg.model.signal_dim(), 0.0);
            for c in 0..cfg.model.signal_dim() {
                s.components[c] = grid
                    .nodes()
                    .iter()
                    .map(|&x| {
                        let d = grid.signed_distance(x, center[c]);
                        amplitude[c] * (-d * d / (2.0 * sigma[c] * sigma[c])).exp()
                    })
                    .collect();
            }
            fill_parabolic_derivatives(&mut s, n0, cfg, op);
            Ok(s)
        }
    }
}

fn fill_parabolic_derivatives(
    s: &mut SignalField,
    n: &[f64],
    cfg: &ScenarioConfig,
    op: &SpectralOp,
) {
    for (c, comp) in cfg.model.signal.iter().enumerate() {
        s.dx[c] = op.derivative(&s.components[c]);
        let second = op.second_derivative(&s.components[c]);
        s.dt[c] = s.components[c]
            .iter()
            .zip(&second)
            .zip(n)
            .map(|((&sv, &spp), &nv)| {
                let reaction = match cfg.model.reaction {
                    crate::model::ReactionVariant::ProduceDegrade => {
                        comp.production * nv - comp.decay * sv
                    }
                    crate::model::ReactionVariant::Consume => {
                        -comp.production * nv * sv - comp.decay * sv
                    }
                };
                comp.diffusion * spp + reaction
            })
            .collect();
    }
}

fn measure_det_inv(
    t: f64,
    peak_x: f64,
    cfg: &ScenarioConfig,
    history: &SignalHistory,
) -> Result<f64> {
    if t <= 0.0 {
        return Ok(1.0);
    }
    let v = cfg.model.velocities.max_speed();
    let y = cfg.initial.y_center;
    let trace: CharacteristicTrace =
        trace_characteristic(peak_x, v, y, t, 0.0, history, &cfg.model)?;
    let mu = cfg.model.div_f_magnitude();
    let est = jacobian_det_general(&trace, |_, _| -mu);
    // est.value is det over [0, t] (>= 1 for the contracting dynamics).
    Ok(1.0 / est.value)
}

fn record_sample(
    t: f64,
    moments: &Moments,
    field: &SignalField,
    det_inv: f64,
    y1_mean: f64,
    grid: &XGrid,
) -> Result<MomentSample> {
    let conc = concentration_metrics(&moments.n, grid)?;
    let h = grid.h();
    let n_l1 = moments.n.iter().map(|v| v.abs()).sum::<f64>() * h;
    let n_l2 = (moments.n.iter().map(|v| v * v).sum::<f64>() * h).sqrt();
    let m = field.num_components();
    Ok(MomentSample {
        t,
        mass: moments.mass,
        f_l1: moments.l1,
        f_l2: moments.l2,
        f_linf: moments.linf,
        n_peak: conc.peak_value,
        n_variance: conc.variance,
        n_l1,
        n_l2,
        det_inv,
        y1_mean,
        s_sup: (0..m).map(|c| field.sup_norm(c)).collect(),
        s_dx_sup: (0..m).map(|c| field.dx_sup_norm(c)).collect(),
        s_dt_sup: (0..m).map(|c| field.dt_sup_norm(c)).collect(),
    })
}

fn bound_reports_for(
    cfg: &ScenarioConfig,
    rows: &[MomentSample],
    s0_sup: f64,
    s0_dx_sup: f64,
) -> Result<Vec<BoundReport>> {
    let n1_0 = rows.first().map(|r| r.n_l1).unwrap_or(0.0);
    let mut running_n2 = 0.0f64;
    rows.iter()
        .map(|r| {
            running_n2 = running_n2.max(r.n_l2);
            let n2 = match cfg.signal_mode {
                SignalMode::Elliptic => r.n_l2,
                SignalMode::Parabolic => running_n2,
            };
            signal_bound_report(
                n1_0,
                n2,
                &BoundParams {
                    components: &cfg.model.signal,
                    max_speed: cfg.model.velocities.max_speed(),
                    mode: cfg.signal_mode,
                    s0_sup,
                    s0_dx_sup,
                },
            )
        })
        .collect()
}

type KineticOutput = (RunSummary, Option<CompareContext>);

fn kinetic_run(
    loaded: &LoadedScenario,
    out_dir: &Path,
    keep_context: bool,
) -> Result<KineticOutput> {
    let cfg = &loaded.config;
    let model = &cfg.model;
    let grid = XGrid::new(model.domain_length, model.nx);
    let op = SpectralOp::new(&grid);

    let mut field = build_initial_field(cfg);
    let mut moments = density_and_flux(&field);
    let mass0 = moments.mass;

    let s_now = signal_from_initial(cfg, &grid, &op, &moments.n, &moments.flux)?;
    let s0_sup: f64 = (0..s_now.num_components())
        .map(|c| s_now.sup_norm(c))
        .fold(0.0, f64::max);
    let s0_dx_sup: f64 = (0..s_now.num_components())
        .map(|c| s_now.dx_sup_norm(c))
        .fold(0.0, f64::max);
    let mut history = SignalHistory::with_level(s_now.clone());
    let mut current_signal = s_now;

    let n_steps = if cfg.horizon > 0.0 {
        (cfg.horizon / cfg.dt).round().max(1.0) as usize
    } else {
        0
    };

    let mut rows: Vec<MomentSample> = Vec::new();
    let mut densities: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut clipped_total = 0.0;
    let mut snapshot_id = 0usize;

    let record = |t: f64,
                      field: &PhaseSpaceField,
                      moments: &Moments,
                      signal: &SignalField,
                      history: &SignalHistory,
                      rows: &mut Vec<MomentSample>,
                      densities: &mut Vec<(f64, Vec<f64>)>|
     -> Result<()> {
        let peak = concentration_metrics(&moments.n, &grid)?.peak_location;
        let det_inv = measure_det_inv(t, peak, cfg, history)?;
        let y1_mean = field.y1_marginal_mean();
        rows.push(record_sample(t, moments, signal, det_inv, y1_mean, &grid)?);
        if keep_context {
            densities.push((t, moments.n.clone()));
        }
        Ok(())
    };

    record(
        0.0,
        &field,
        &moments,
        &current_signal,
        &history,
        &mut rows,
        &mut densities,
    )?;
    write_signal_csv(
        &out_dir.join(format!("signal_{snapshot_id:06}.csv")),
        &current_signal,
        &cfg.hash,
    )?;
    write_field_bin(
        &out_dir.join(format!("field_{snapshot_id:06}.bin")),
        &field,
        &cfg.hash,
    )?;
    snapshot_id += 1;

    for step in 1..=n_steps {
        let t = (step - 1) as f64 * cfg.dt;
        let t_next = step as f64 * cfg.dt;
        match cfg.signal_mode {
            SignalMode::Elliptic => {
                // Midpoint predictor for the density through the continuity
                // equation dn/dt = -dj/dx.
                let djdx = op.derivative(&moments.flux);
                let n_mid: Vec<f64> = moments
                    .n
                    .iter()
                    .zip(&djdx)
                    .map(|(n, dj)| n - 0.5 * cfg.dt * dj)
                    .collect();
                let mut s_mid =
                    solve_elliptic(&n_mid, &model.signal, &grid, &op, t + 0.5 * cfg.dt)?;
                fill_dt_from_flux(&mut s_mid, &moments.flux, &model.signal, &op);
                history.push(s_mid);
            }
            SignalMode::Parabolic => {
                let mut s_half = step_parabolic(
                    &current_signal,
                    &moments.n,
                    0.5 * cfg.dt,
                    &model.signal,
                    model.reaction,
                    &op,
                )?;
                s_half.time = t + 0.5 * cfg.dt;
                history.push(s_half.clone());
                current_signal = s_half;
            }
        }

        let (next, diag) = step_kinetic(&field, &history, cfg.dt, model)?;
        field = next;
        clipped_total += diag.clipped_mass;
        moments = density_and_flux(&field);

        match cfg.signal_mode {
            SignalMode::Elliptic => {
                let mut s_new = solve_elliptic(&moments.n, &model.signal, &grid, &op, t_next)?;
                fill_dt_from_flux(&mut s_new, &moments.flux, &model.signal, &op);
                history.push(s_new.clone());
                current_signal = s_new;
            }
            SignalMode::Parabolic => {
                let mut s_new = step_parabolic(
                    &current_signal,
                    &moments.n,
                    0.5 * cfg.dt,
                    &model.signal,
                    model.reaction,
                    &op,
                )?;
                s_new.time = t_next;
                history.push(s_new.clone());
                current_signal = s_new;
            }
        }

        let is_output = step % cfg.output_every == 0 || step == n_steps;
        if is_output {
            record(
                t_next,
                &field,
                &moments,
                &current_signal,
                &history,
                &mut rows,
                &mut densities,
            )?;
        }
        let snapshot_due = cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0;
        if snapshot_due || step == n_steps {
            write_signal_csv(
                &out_dir.join(format!("signal_{snapshot_id:06}.csv")),
                &current_signal,
                &cfg.hash,
            )?;
            write_field_bin(
                &out_dir.join(format!("field_{snapshot_id:06}.bin")),
                &field,
                &cfg.hash,
            )?;
            snapshot_id += 1;
        }
    }

    // Ledger.
    let consts = EnvelopeConstants::derive(
        model,
        &cfg.growth,
        cfg.state_box.volume(),
        mass0,
    );
    let reports = bound_reports_for(cfg, &rows, s0_sup, s0_dx_sup)?;
    let ledger = match cfg.signal_mode {
        SignalMode::Elliptic => check_elliptic_bounds(&rows, &reports, &consts)?,
        SignalMode::Parabolic => check_parabolic_bounds(&rows, &reports, &consts)?,
    };

    write_moments_csv(&out_dir.join("moments.csv"), &rows, &cfg.hash)?;
    write_ledger_csv(&out_dir.join("ledger.csv"), &ledger, &cfg.hash)?;

    let final_mass = rows.last().map(|r| r.mass).unwrap_or(0.0);
    let summary = RunSummary {
        mode: cfg.mode,
        steps: n_steps,
        recorded_rows: rows.len(),
        final_mass,
        mass_drift: if mass0 > 0.0 {
            ((final_mass - mass0) / mass0).abs()
        } else {
            0.0
        },
        violations: ledger.violations(),
        clipped_mass_total: clipped_total,
        compare_max_l1: None,
        wall_seconds: 0.0,
        out_dir: out_dir.to_path_buf(),
    };
    let ctx = keep_context.then_some(CompareContext { history, densities });
    Ok((summary, ctx))
}

// ---------------------------------------------------------------------------
// Agent phases
// ---------------------------------------------------------------------------

fn agent_compare_phase(
    loaded: &LoadedScenario,
    out_dir: &Path,
    ctx: &CompareContext,
) -> Result<f64> {
    let cfg = &loaded.config;
    let grid = XGrid::new(cfg.model.domain_length, cfg.model.nx);
    let mut ens = sample_ensemble(cfg, cfg.n_agents);
    ens.validate(cfg.model.velocities.len(), &cfg.state_box)?;
    let mut comparisons: Vec<(f64, f64)> = Vec::new();
    let h = grid.h();

    let mut target = ctx.densities.iter().peekable();
    // Initial comparison.
    if let Some((t0, n_kin)) = target.peek() {
        let n_agent = empirical_density(&ens, &grid);
        let l1 = n_kin
            .iter()
            .zip(&n_agent)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * h;
        comparisons.push((*t0, l1));
        target.next();
    }
    let n_steps = if cfg.horizon > 0.0 {
        (cfg.horizon / cfg.dt).round().max(1.0) as usize
    } else {
        0
    };
    for step in 1..=n_steps {
        ens = step_agents(&ens, &ctx.history, cfg.dt, &cfg.model, loaded.lambda_max)?;
        let t = step as f64 * cfg.dt;
        if let Some((t_kin, n_kin)) = target.peek() {
            if (t - t_kin).abs() <= 1e-9 * (1.0 + t.abs()) {
                let n_agent = empirical_density(&ens, &grid);
                let l1 = n_kin
                    .iter()
                    .zip(&n_agent)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    * h;
                comparisons.push((*t_kin, l1));
                target.next();
            }
        }
    }
    let mut text = format!("# config_sha256 = {}\nt,l1_distance\n", cfg.hash);
    for (t, l1) in &comparisons {
        let _ = writeln!(text, "{},{}", fmt_f(*t), fmt_f(*l1));
    }
    std::fs::write(out_dir.join("compare.csv"), text)?;
    Ok(comparisons
        .iter()
        .map(|&(_, l1)| l1)
        .fold(0.0f64, f64::max))
}

fn agent_run(loaded: &LoadedScenario, out_dir: &Path) -> Result<RunSummary> {
    let cfg = &loaded.config;
    let model = &cfg.model;
    let grid = XGrid::new(model.domain_length, model.nx);
    let op = SpectralOp::new(&grid);
    let mut ens = sample_ensemble(cfg, cfg.n_agents);
    ens.validate(model.velocities.len(), &cfg.state_box)?;

    // The density the signal sees: sampled agents (two-way) or the frozen
    // initial profile (one-way).
    let n0: Vec<f64> = initial_density_profile(cfg, &grid)
        .iter()
        .map(|v| v * cfg.initial.mass)
        .collect();
    let flux0 = vec![0.0; grid.n];
    let s0 = signal_from_initial(cfg, &grid, &op, &n0, &flux0)?;
    let s0_sup: f64 = (0..s0.num_components()).map(|c| s0.sup_norm(c)).fold(0.0, f64::max);
    let s0_dx_sup: f64 = (0..s0.num_components())
        .map(|c| s0.dx_sup_norm(c))
        .fold(0.0, f64::max);
    let mut history = SignalHistory::with_level(s0.clone());
    let mut current_signal = s0;

    let n_steps = if cfg.horizon > 0.0 {
        (cfg.horizon / cfg.dt).round().max(1.0) as usize
    } else {
        0
    };
    let mut rows: Vec<MomentSample> = Vec::new();
    let mut trajectories: Vec<TrajectorySample> = Vec::new();

    let agent_sample = |t: f64, ens: &AgentEnsemble, signal: &SignalField| -> Result<MomentSample> {
        let n = empirical_density(ens, &grid);
        let conc = concentration_metrics(&n, &grid)?;
        let h = grid.h();
        let n_l1 = n.iter().sum::<f64>() * h;
        let n_l2 = (n.iter().map(|v| v * v).sum::<f64>() * h).sqrt();
        let m = signal.num_components();
        Ok(MomentSample {
            t,
            mass: ens.mass,
            f_l1: 0.0,
            f_l2: 0.0,
            f_linf: 0.0,
            n_peak: conc.peak_value,
            n_variance: conc.variance,
            n_l1,
            n_l2,
            det_inv: 1.0,
            y1_mean: if ens.is_empty() {
                0.0
            } else {
                ens.y.iter().map(|y| y[0]).sum::<f64>() / ens.len() as f64
            },
            s_sup: (0..m).map(|c| signal.sup_norm(c)).collect(),
            s_dx_sup: (0..m).map(|c| signal.dx_sup_norm(c)).collect(),
            s_dt_sup: (0..m).map(|c| signal.dt_sup_norm(c)).collect(),
        })
    };
    rows.push(agent_sample(0.0, &ens, &current_signal)?);

    for step in 1..=n_steps {
        let t = (step - 1) as f64 * cfg.dt;
        let t_next = step as f64 * cfg.dt;
        // Extend the history so the step is covered.
        match cfg.coupling {
            Coupling::OneWay => {
                let mut lvl = current_signal.clone();
                match cfg.signal_mode {
                    SignalMode::Elliptic => {
                        lvl.time = t_next;
                        history.push(lvl);
                    }
                    SignalMode::Parabolic => {
                        let mut s_new = step_parabolic(
                            &current_signal,
                            &n0,
                            cfg.dt,
                            &model.signal,
                            model.reaction,
                            &op,
                        )?;
                        s_new.time = t_next;
                        history.push(s_new.clone());
                        current_signal = s_new;
                    }
                }
            }
            Coupling::TwoWay => {
                let n_emp = empirical_density(&ens, &grid);
                let mut s_new = match cfg.signal_mode {
                    SignalMode::Elliptic => {
                        solve_elliptic(&n_emp, &model.signal, &grid, &op, t_next)?
                    }
                    SignalMode::Parabolic => step_parabolic(
                        &current_signal,
                        &n_emp,
                        cfg.dt,
                        &model.signal,
                        model.reaction,
                        &op,
                    )?,
                };
                s_new.time = t_next;
                history.push(s_new.clone());
                current_signal = s_new;
            }
        }
        let _ = t;
        if cfg.trajectories > 0 {
            let (next, samples) = step_agents_recording(
                &ens,
                &history,
                cfg.dt,
                model,
                loaded.lambda_max,
                cfg.trajectories,
            )?;
            ens = next;
            trajectories.extend(samples);
        } else {
            ens = step_agents(&ens, &history, cfg.dt, model, loaded.lambda_max)?;
        }
        if step % cfg.output_every == 0 || step == n_steps {
            rows.push(agent_sample(t_next, &ens, &current_signal)?);
        }
    }

    let consts = EnvelopeConstants::derive(
        model,
        &cfg.growth,
        cfg.state_box.volume(),
        cfg.initial.mass,
    );
    let reports = bound_reports_for(cfg, &rows, s0_sup, s0_dx_sup)?;
    let ledger = check_signal_bounds(&rows, &reports, &consts)?;
    write_moments_csv(&out_dir.join("moments.csv"), &rows, &cfg.hash)?;
    write_ledger_csv(&out_dir.join("ledger.csv"), &ledger, &cfg.hash)?;
    if cfg.trajectories > 0 {
        write_trajectories_csv(&out_dir.join("trajectories.csv"), &trajectories, &cfg.hash)?;
    }

    Ok(RunSummary {
        mode: cfg.mode,
        steps: n_steps,
        recorded_rows: rows.len(),
        final_mass: ens.mass,
        mass_drift: 0.0,
        violations: ledger.violations(),
        clipped_mass_total: 0.0,
        compare_max_l1: None,
        wall_seconds: 0.0,
        out_dir: out_dir.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// Monitor-only run
// ---------------------------------------------------------------------------

fn monitor_run(loaded: &LoadedScenario, out_dir: &Path) -> Result<RunSummary> {
    let series = out_dir.join("moments.csv");
    recompute_bounds(loaded, &series, out_dir, 1.0)
}

/// Rebuilds the ledger from a recorded moment series; used by the monitor
/// mode and the `bounds` subcommand.
pub fn recompute_bounds(
    loaded: &LoadedScenario,
    series: &Path,
    out_dir: &Path,
    scale: f64,
) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = &loaded.config;
    let rows = read_moments_csv(series, cfg.model.signal_dim())?;
    let consts = EnvelopeConstants::derive(
        &cfg.model,
        &cfg.growth,
        cfg.state_box.volume(),
        rows.first().map(|r| r.n_l1).unwrap_or(cfg.initial.mass),
    )
    .with_scale(scale);
    // Initial signal sups for the parabolic bound come from the recorded
    // first row.
    let (s0_sup, s0_dx_sup) = rows
        .first()
        .map(|r| {
            (
                r.s_sup.iter().cloned().fold(0.0, f64::max),
                r.s_dx_sup.iter().cloned().fold(0.0, f64::max),
            )
        })
        .unwrap_or((0.0, 0.0));
    let reports = bound_reports_for(cfg, &rows, s0_sup, s0_dx_sup)?;
    let ledger = match cfg.signal_mode {
        SignalMode::Elliptic => check_elliptic_bounds(&rows, &reports, &consts)?,
        SignalMode::Parabolic => check_parabolic_bounds(&rows, &reports, &consts)?,
    };
    write_ledger_csv(&out_dir.join("ledger.csv"), &ledger, &cfg.hash)?;
    Ok(RunSummary {
        mode: RunMode::Monitor,
        steps: 0,
        recorded_rows: rows.len(),
        final_mass: rows.last().map(|r| r.mass).unwrap_or(0.0),
        mass_drift: 0.0,
        violations: ledger.violations(),
        clipped_mass_total: 0.0,
        compare_max_l1: None,
        wall_seconds: 0.0,
        out_dir: out_dir.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

pub fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_moments_csv(path: &Path, rows: &[MomentSample], hash: &str) -> Result<()> {
    let m = rows.first().map(|r| r.s_sup.len()).unwrap_or(0);
    let mut text = format!("# config_sha256 = {hash}\n");
    text.push_str("t,mass,f_l1,f_l2,f_linf,n_peak,n_variance,n_l1,n_l2,det_inv,y1_mean");
    for c in 0..m {
        let _ = write!(text, ",s_sup_{c},s_dx_sup_{c},s_dt_sup_{c}");
    }
    text.push('\n');
    for r in rows {
        let _ = write!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f(r.t),
            fmt_f(r.mass),
            fmt_f(r.f_l1),
            fmt_f(r.f_l2),
            fmt_f(r.f_linf),
            fmt_f(r.n_peak),
            fmt_f(r.n_variance),
            fmt_f(r.n_l1),
            fmt_f(r.n_l2),
            fmt_f(r.det_inv),
            fmt_f(r.y1_mean),
        );
        for c in 0..m {
            let _ = write!(
                text,
                ",{},{},{}",
                fmt_f(r.s_sup[c]),
                fmt_f(r.s_dx_sup[c]),
                fmt_f(r.s_dt_sup[c])
            );
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_moments_csv(path: &Path, m: usize) -> Result<Vec<MomentSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with('t') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ChemoError::Argument(format!("bad moments row '{line}': {e}")))?;
        if cols.len() < 11 + 3 * m {
            return Err(ChemoError::Argument(format!(
                "moments row has {} columns, expected {}",
                cols.len(),
                11 + 3 * m
            )));
        }
        rows.push(MomentSample {
            t: cols[0],
            mass: cols[1],
            f_l1: cols[2],
            f_l2: cols[3],
            f_linf: cols[4],
            n_peak: cols[5],
            n_variance: cols[6],
            n_l1: cols[7],
            n_l2: cols[8],
            det_inv: cols[9],
            y1_mean: cols[10],
            s_sup: (0..m).map(|c| cols[11 + 3 * c]).collect(),
            s_dx_sup: (0..m).map(|c| cols[12 + 3 * c]).collect(),
            s_dt_sup: (0..m).map(|c| cols[13 + 3 * c]).collect(),
        });
    }
    Ok(rows)
}

fn write_ledger_csv(path: &Path, ledger: &BoundLedger, hash: &str) -> Result<()> {
    let mut text = format!("# config_sha256 = {hash}\n");
    for line in ledger.header.split(';') {
        let _ = writeln!(text, "# {}", line.trim());
    }
    text.push_str("t,inequality_id,measured,bound,margin,violated\n");
    for r in &ledger.rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            fmt_f(r.t),
            r.id,
            fmt_f(r.measured),
            fmt_f(r.bound),
            fmt_f(r.margin),
            if r.violated { 1 } else { 0 }
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_signal_csv(path: &Path, field: &SignalField, hash: &str) -> Result<()> {
    let m = field.num_components();
    let mut text = format!("# config_sha256 = {hash}\n# t = {}\n", fmt_f(field.time));
    text.push('x');
    for c in 0..m {
        let _ = write!(text, ",S_{c}");
    }
    for c in 0..m {
        let _ = write!(text, ",dxS_{c}");
    }
    for c in 0..m {
        let _ = write!(text, ",dtS_{c}");
    }
    text.push('\n');
    for i in 0..field.grid.n {
        let _ = write!(text, "{}", fmt_f(field.grid.node(i)));
        for c in 0..m {
            let _ = write!(text, ",{}", fmt_f(field.components[c][i]));
        }
        for c in 0..m {
            let _ = write!(text, ",{}", fmt_f(field.dx[c][i]));
        }
        for c in 0..m {
            let _ = write!(text, ",{}", fmt_f(field.dt[c][i]));
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

const FIELD_MAGIC: &[u8; 4] = b"CHMK";
const FIELD_VERSION: u32 = 1;

/// Flat binary snapshot with a self-describing header.
pub fn write_field_bin(path: &Path, field: &PhaseSpaceField, hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(FIELD_MAGIC)?;
    out.write_all(&FIELD_VERSION.to_le_bytes())?;
    let hash_bytes = hash.as_bytes();
    out.write_all(&(hash_bytes.len() as u32).to_le_bytes())?;
    out.write_all(hash_bytes)?;
    let (nx, nv, n1, n2) = field.dims();
    for dim in [nx, nv, n1, n2] {
        out.write_all(&(dim as u64).to_le_bytes())?;
    }
    out.write_all(&field.x_grid.length.to_le_bytes())?;
    for v in [
        field.y_grid.bounds.lo[0],
        field.y_grid.bounds.lo[1],
        field.y_grid.bounds.hi[0],
        field.y_grid.bounds.hi[1],
        field.time,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in field.speeds.iter().chain(field.v_weights.iter()) {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in field.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads back a snapshot written by [`write_field_bin`]; returns the field
/// and the embedded config hash.
pub fn read_field_bin(path: &Path) -> Result<(PhaseSpaceField, String)> {
    let bytes = std::fs::read(path)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(ChemoError::Argument("truncated field snapshot".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != FIELD_MAGIC {
        return Err(ChemoError::Argument("not a field snapshot".into()));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != FIELD_VERSION {
        return Err(ChemoError::Argument(format!(
            "unsupported snapshot version {version}"
        )));
    }
    let hash_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let hash = String::from_utf8_lossy(take(&mut at, hash_len)?).to_string();
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    }
    let f64s = |at: &mut usize, n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(take(at, 8)?.try_into().unwrap()));
        }
        Ok(out)
    };
    let length = f64s(&mut at, 1)?[0];
    let boxvals = f64s(&mut at, 5)?;
    let speeds = f64s(&mut at, dims[1])?;
    let weights = f64s(&mut at, dims[1])?;
    let data = f64s(&mut at, dims[0] * dims[1] * dims[2] * dims[3])?;
    let x_grid = XGrid::new(length, dims[0]);
    let y_grid = YGrid::new(
        crate::grid::YBox {
            lo: [boxvals[0], boxvals[1]],
            hi: [boxvals[2], boxvals[3]],
        },
        [dims[2], dims[3]],
    );
    let mut field = PhaseSpaceField::zeros(x_grid, speeds, weights, y_grid, boxvals[4]);
    let (nx, nv, n1, n2) = field.dims();
    let mut i = 0;
    for ix in 0..nx {
        for iv in 0..nv {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    field.set(ix, iv, i1, i2, data[i]);
                    i += 1;
                }
            }
        }
    }
    Ok((field, hash))
}

fn write_trajectories_csv(
    path: &Path,
    samples: &[TrajectorySample],
    hash: &str,
) -> Result<()> {
    let mut text = format!("# config_sha256 = {hash}\nagent,t,x,v,y1,y2,event\n");
    for s in samples {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            s.agent,
            fmt_f(s.t),
            fmt_f(s.x),
            fmt_f(s.v),
            fmt_f(s.y[0]),
            fmt_f(s.y[1]),
            if s.event { 1 } else { 0 }
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes a characteristic trace as CSV for debugging.
pub fn write_trace_csv(path: &Path, trace: &CharacteristicTrace, hash: &str) -> Result<()> {
    let mut text = format!("# config_sha256 = {hash}\ntau,x,y1,y2,jac_det\n");
    for i in 0..trace.s_grid.len() {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            fmt_f(trace.s_grid[i]),
            fmt_f(trace.x_path[i]),
            fmt_f(trace.y_path[i][0]),
            fmt_f(trace.y_path[i][1]),
            fmt_f(trace.jac_det[i])
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_summary(loaded: &LoadedScenario, out_dir: &Path, summary: &RunSummary) -> Result<()> {
    let cfg = &loaded.config;
    let mut text = String::new();
    let _ = writeln!(text, "config_sha256 = {}", cfg.hash);
    let _ = writeln!(text, "mode = {:?}", summary.mode);
    let _ = writeln!(text, "signal_mode = {:?}", cfg.signal_mode);
    let _ = writeln!(text, "steps = {}", summary.steps);
    let _ = writeln!(text, "recorded_rows = {}", summary.recorded_rows);
    let _ = writeln!(text, "final_mass = {}", fmt_f(summary.final_mass));
    let _ = writeln!(text, "mass_drift = {}", fmt_f(summary.mass_drift));
    let _ = writeln!(text, "violations = {}", summary.violations);
    let _ = writeln!(
        text,
        "clipped_mass_total = {}",
        fmt_f(summary.clipped_mass_total)
    );
    if let Some(l1) = summary.compare_max_l1 {
        let _ = writeln!(text, "compare_max_l1 = {}", fmt_f(l1));
    }
    let _ = writeln!(text, "wall_seconds = {:.3}", summary.wall_seconds);
    let _ = writeln!(
        text,
        "regimes = {}",
        loaded
            .validation
            .regimes
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(text, "lambda_max = {}", fmt_f(loaded.lambda_max));
    std::fs::write(out_dir.join("summary.txt"), text)?;
    Ok(())
}

/// Deterministic summed L1 distance between two densities.
pub fn l1_distance(a: &[f64], b: &[f64], h: f64) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    fold_partials(&diffs) * h
}

/// Validation report rendering for the CLI.
pub fn render_validation(loaded: &LoadedScenario) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "hash: {}", loaded.config.hash);
    let _ = writeln!(
        text,
        "state box: y1 in [{:.4}, {:.4}], y2 in [{:.4}, {:.4}]",
        loaded.config.state_box.lo[0],
        loaded.config.state_box.hi[0],
        loaded.config.state_box.lo[1],
        loaded.config.state_box.hi[1]
    );
    let _ = writeln!(text, "signal sup bound S_bar = {:.6}", loaded.config.s_bar);
    let _ = writeln!(text, "lambda_max over box = {:.6}", loaded.lambda_max);
    let _ = writeln!(text, "kernel bound C_K = {:.6}", loaded.validation.c_k);
    for check in &loaded.validation.checks {
        let status = if check.passed { "pass" } else { "FAIL" };
        match &check.witness {
            Some((loc, lhs, rhs)) if !check.passed => {
                let _ = writeln!(
                    text,
                    "  [{status}] {} (witness {loc}: lhs = {lhs:.6e}, rhs = {rhs:.6e})",
                    check.id
                );
            }
            _ => {
                let _ = writeln!(text, "  [{status}] {}", check.id);
            }
        }
    }
    let regimes: Vec<String> = loaded
        .validation
        .regimes
        .iter()
        .map(|r| r.to_string())
        .collect();
    let _ = writeln!(
        text,
        "satisfied regimes: {}",
        if regimes.is_empty() {
            "none".into()
        } else {
            regimes.join(", ")
        }
    );
    text
}
