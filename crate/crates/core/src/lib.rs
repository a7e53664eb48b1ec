//! Joint energy-bandwidth scheduling for energy-harvesting transmitters that
//! share one frequency band.
//!
//! The crate computes the optimal non-causal schedule with an alternating
//! block solver ([`scheduler::solve`]), a causal adaptive water-filling
//! heuristic and three baseline policies ([`policies`]), and certifies
//! optimality through KKT residuals and brute-force oracles ([`verify`]).
//! [`harness`] drives seeded Monte Carlo campaigns over all policies.

// `!(x > 0.0)` also rejects NaN, and indexed loops over parallel per-link
// arrays read better than zipped iterators here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bandwidth;
pub mod cli;
pub mod discharge;
pub mod harness;
pub mod model;
pub mod policies;
pub mod scheduler;
pub mod verify;
pub mod waterfill;

pub use bandwidth::{fit_bandwidth, verify_split_optimality, BandwidthError};
pub use discharge::{discharge_is_minimal, greedy_discharge};
pub use model::{objective, Allocation, DischargePlan, Instance, ModelError};
pub use scheduler::{solve, Solution, SolveOptions};
pub use waterfill::{solve_ep, SegmentProfile};

/// Absolute tolerance used for constraint checks on energy quantities.
pub const FEAS_TOL: f64 = 1e-9;
