//! Kinetic simulator for run-and-tumble chemotaxis in one dimension.
//!
//! Cells carry an internal excitation-adaptation state that filters the
//! extracellular signal they see along their path; the turning rate of the
//! velocity-jump process depends on the fast response variable. The crate
//! provides:
//!
//! * a deterministic phase-space solver (`kinetic`) using operator splitting
//!   with exact x-shifts, conservative semi-Lagrangian internal-state
//!   advection along exact characteristics, and matrix-exponential turning;
//! * an independent stochastic oracle (`agents`) simulating the same process
//!   agent-by-agent with exact Poisson thinning;
//! * elliptic and parabolic signal solvers (`signal`) with explicit
//!   sup-norm and derivative bounds;
//! * runtime monitors (`monitor`) that evaluate the a priori estimates --
//!   Gronwall envelopes, Jacobian bounds, signal bounds -- on running
//!   simulations and record violations as data.

pub mod agents;
pub mod characteristics;
pub mod config;
pub mod error;
pub mod grid;
pub mod kinetic;
pub mod model;
pub mod monitor;
pub mod rng;
pub mod runner;
pub mod signal;

pub use error::{ChemoError, Result};
