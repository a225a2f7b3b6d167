//! Command-line runner.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! errors. Bound violations are data, not errors; check `ledger.csv` and
//! the summary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chemokin::config::{load_config, LoadedScenario};
use chemokin::grid::XGrid;
use chemokin::kinetic::density_and_flux;
use chemokin::runner::{
    build_initial_field, recompute_bounds, render_validation, run_scenario, write_trace_csv,
};
use chemokin::signal::{fill_dt_from_flux, solve_elliptic, SignalHistory, SpectralOp};

#[derive(Parser)]
#[command(
    name = "chemokin",
    about = "1D velocity-jump chemotaxis simulator with runtime bound monitoring",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write all outputs to a directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a scenario; print the growth-hypothesis report.
    Validate { config: PathBuf },
    /// Recompute the bound ledger from a recorded moment series.
    Bounds {
        config: PathBuf,
        /// moments.csv produced by a previous run.
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Multiply every bound by this factor (0.5 is the mis-specified
        /// negative control).
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Trace one back-time characteristic against the initial elliptic
    /// signal and dump it as CSV.
    Trace {
        config: PathBuf,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        v: f64,
        #[arg(long, default_value_t = 0.0)]
        y1: f64,
        #[arg(long, default_value_t = 0.0)]
        y2: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_or_exit(path: &PathBuf) -> Result<LoadedScenario, ExitCode> {
    match load_config(path) {
        Ok(loaded) => Ok(loaded),
        Err(errors) => {
            eprintln!("configuration rejected ({} problems):", errors.len());
            for e in errors {
                eprintln!("  {e}");
            }
            Err(ExitCode::from(2))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let loaded = match load_or_exit(&config) {
                Ok(l) => l,
                Err(code) => return code,
            };
            match run_scenario(&loaded, &out) {
                Ok(summary) => {
                    println!(
                        "run complete: {} steps, {} rows, final mass {:.6e}, \
                         mass drift {:.3e}, {} bound violation(s), {:.2}s",
                        summary.steps,
                        summary.recorded_rows,
                        summary.final_mass,
                        summary.mass_drift,
                        summary.violations,
                        summary.wall_seconds
                    );
                    if let Some(l1) = summary.compare_max_l1 {
                        println!("max kinetic-agent L1 distance: {l1:.4}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("runtime error: {e}");
                    ExitCode::from(3)
                }
            }
        }
        Command::Validate { config } => {
            let loaded = match load_or_exit(&config) {
                Ok(l) => l,
                Err(code) => return code,
            };
            print!("{}", render_validation(&loaded));
            ExitCode::SUCCESS
        }
        Command::Bounds {
            config,
            series,
            out,
            scale,
        } => {
            let loaded = match load_or_exit(&config) {
                Ok(l) => l,
                Err(code) => return code,
            };
            match recompute_bounds(&loaded, &series, &out, scale) {
                Ok(summary) => {
                    println!(
                        "ledger rebuilt over {} rows: {} violation(s)",
                        summary.recorded_rows, summary.violations
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("runtime error: {e}");
                    ExitCode::from(3)
                }
            }
        }
        Command::Trace {
            config,
            x,
            v,
            y1,
            y2,
            t,
            s,
            out,
        } => {
            let loaded = match load_or_exit(&config) {
                Ok(l) => l,
                Err(code) => return code,
            };
            let cfg = &loaded.config;
            let result = (|| -> chemokin::Result<()> {
                let grid = XGrid::new(cfg.model.domain_length, cfg.model.nx);
                let op = SpectralOp::new(&grid);
                let field = build_initial_field(cfg);
                let moments = density_and_flux(&field);
                let mut s0 = solve_elliptic(&moments.n, &cfg.model.signal, &grid, &op, 0.0)?;
                fill_dt_from_flux(&mut s0, &moments.flux, &cfg.model.signal, &op);
                let mut hist = SignalHistory::with_level(s0.clone());
                let mut s_end = s0;
                s_end.time = t.max(1.0);
                hist.push(s_end);
                let trace = chemokin::characteristics::trace_characteristic(
                    x,
                    v,
                    [y1, y2],
                    t,
                    s,
                    &hist,
                    &cfg.model,
                )?;
                write_trace_csv(&out, &trace, &cfg.hash)
            })();
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("runtime error: {e}");
                    ExitCode::from(3)
                }
            }
        }
    }
}
