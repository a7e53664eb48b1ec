//! Alternating energy-bandwidth optimization for point-to-point instances.
//!
//! After the discharge stage fixes each transmitter's effective budget, the
//! loop alternates between per-slot bandwidth fitting (with a floor
//! `eps0 / i` that shrinks every iteration) and per-transmitter water-filling.
//! Both blocks are solved exactly, so the objective never decreases.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandwidth::{fit_bandwidth, BandwidthError};
use crate::discharge::greedy_discharge;
use crate::model::{objective, Allocation, DischargePlan, Instance, ModelError};
use crate::verify::reference::{reference_solve, solve_conic, ReferenceOptions, ReferenceSolution};
use crate::waterfill::{solve_ep, EnergySlice, SegmentProfile, WaterfillError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("the fast solver handles point-to-point instances with unit weights only; use the reference solver")]
    Unsupported,
    #[error("invalid solver option `{0}`")]
    InvalidOption(&'static str),
    #[error("transmitter {transmitter}: {source}")]
    Energy {
        transmitter: usize,
        source: WaterfillError,
    },
    #[error("slot {slot}: {source}")]
    Bandwidth { slot: usize, source: BandwidthError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reference(#[from] crate::verify::ReferenceError),
    #[error("instance too large for the reference solver: K*M = {size} exceeds {limit}")]
    TooLarge { size: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Initial bandwidth floor; `None` picks `1 / (2M)`.
    pub eps0: Option<f64>,
    /// Stop once the objective moves by less than this fraction of its value.
    pub delta: f64,
    pub max_iters: usize,
    /// Run the per-slot and per-transmitter subproblems on the rayon pool.
    pub parallel: bool,
    pub extrapolate: bool,
    /// Finish with an interior-point solve at floor `min(refine, last loop
    /// floor)`, kept only if it raises the objective. `None` returns the
    /// loop's allocation at its last floor.
    pub refine: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            eps0: None,
            delta: 1e-3,
            max_iters: 100,
            parallel: false,
            extrapolate: false,
            refine: Some(1e-6),
        }
    }
}

impl SolveOptions {
    pub fn eps0_for(&self, inst: &Instance) -> f64 {
        self.eps0.unwrap_or(1.0 / (2.0 * inst.num_receivers as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    /// Objective before the first iteration (0 on a cold start).
    pub initial_value: f64,
    /// Objective after every iteration, in nats.
    pub values: Vec<f64>,
    /// Bandwidth floor used by every iteration.
    pub eps: Vec<f64>,
    pub iteration_secs: Vec<f64>,
    pub termination: Termination,
    /// Floor the allocation is optimal for: the last iteration's, or the
    /// refinement floor when refinement was kept.
    pub final_eps: f64,
    /// Objective after refinement, when refinement improved on the loop.
    pub refined_value: Option<f64>,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.values.len()
    }

    pub fn final_value(&self) -> f64 {
        self.refined_value
            .or(self.values.last().copied())
            .unwrap_or(self.initial_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub allocation: Allocation,
    pub discharge: DischargePlan,
    pub trace: SolveTrace,
    /// Water-level profile of every transmitter from the last energy solve.
    pub profiles: Vec<SegmentProfile>,
}

/// Optimal non-causal schedule of a point-to-point instance.
pub fn solve(inst: &Instance, opts: &SolveOptions) -> Result<Solution, SolveError> {
    run(inst, opts, None, 0)
}

/// Resumes the loop from `init`, continuing the floor schedule after
/// `iterations_done` iterations. A converged allocation fed back this way
/// terminates after one iteration.
pub fn solve_warm(
    inst: &Instance,
    opts: &SolveOptions,
    init: &Allocation,
    iterations_done: usize,
) -> Result<Solution, SolveError> {
    run(inst, opts, Some(init), iterations_done)
}

fn check_options(inst: &Instance, opts: &SolveOptions) -> Result<f64, SolveError> {
    let eps0 = opts.eps0_for(inst);
    if !(eps0 > 0.0) || eps0 * inst.num_receivers as f64 > 1.0 {
        return Err(SolveError::InvalidOption("eps0"));
    }
    if !(opts.delta > 0.0) {
        return Err(SolveError::InvalidOption("delta"));
    }
    if opts.max_iters == 0 {
        return Err(SolveError::InvalidOption("max_iters"));
    }
    if opts.refine.is_some_and(|f| !(f > 0.0)) {
        return Err(SolveError::InvalidOption("refine"));
    }
    Ok(eps0)
}

fn energy_step(
    inst: &Instance,
    plan: &DischargePlan,
    alloc: &mut Allocation,
    parallel: bool,
) -> Result<Vec<SegmentProfile>, SolveError> {
    let solve_one = |n: usize| {
        let m = inst.link_of(n);
        let slice = EnergySlice {
            bandwidth: &alloc.a[m],
            gains: &inst.gains[m],
            budget: &plan.effective[n],
            max_power: inst.max_power[n],
            battery_cap: inst.battery_cap[n],
        };
        solve_ep(&slice).map_err(|source| SolveError::Energy {
            transmitter: n,
            source,
        })
    };
    let results: Vec<_> = if parallel {
        (0..inst.num_transmitters)
            .into_par_iter()
            .map(solve_one)
            .collect()
    } else {
        (0..inst.num_transmitters).map(solve_one).collect()
    };
    let mut profiles = Vec::with_capacity(results.len());
    for (n, r) in results.into_iter().enumerate() {
        let sol = r?;
        alloc.p[inst.link_of(n)] = sol.energy;
        profiles.push(sol.profile);
    }
    Ok(profiles)
}

fn bandwidth_step(
    inst: &Instance,
    alloc: &mut Allocation,
    eps: f64,
    parallel: bool,
) -> Result<(), SolveError> {
    let links = inst.num_receivers;
    let fit_one = |k: usize| {
        let ph: Vec<f64> = (0..links)
            .map(|m| alloc.p[m][k] * inst.gains[m][k])
            .collect();
        match fit_bandwidth(&ph, eps) {
            Ok(a) => Ok(a),
            Err(BandwidthError::Degenerate) => Ok(vec![1.0 / links as f64; links]),
            Err(source) => Err(SolveError::Bandwidth { slot: k, source }),
        }
    };
    let columns: Vec<_> = if parallel {
        (0..inst.horizon).into_par_iter().map(fit_one).collect()
    } else {
        (0..inst.horizon).map(fit_one).collect()
    };
    for (k, col) in columns.into_iter().enumerate() {
        for (m, a) in col?.into_iter().enumerate() {
            alloc.a[m][k] = a;
        }
    }
    Ok(())
}

fn run(
    inst: &Instance,
    opts: &SolveOptions,
    init: Option<&Allocation>,
    offset: usize,
) -> Result<Solution, SolveError> {
    if !inst.is_point_to_point() {
        return Err(SolveError::Unsupported);
    }
    let eps0 = check_options(inst, opts)?;
    let plan = greedy_discharge(inst);
    let (mut alloc, initial_value) = match init {
        Some(a) => {
            let v = objective(inst, a)?;
            (a.clone(), v)
        }
        None => {
            let mut a = Allocation::uniform(inst.num_receivers, inst.horizon);
            energy_step(inst, &plan, &mut a, opts.parallel)?;
            (a, 0.0)
        }
    };
    let mut trace = SolveTrace {
        initial_value,
        values: Vec::new(),
        eps: Vec::new(),
        iteration_secs: Vec::new(),
        termination: Termination::MaxIterations,
        final_eps: eps0,
        refined_value: None,
    };
    let mut profiles = Vec::new();
    let mut previous = initial_value;
    let mut omega = 2.0;
    for i in 1..=opts.max_iters {
        let started = Instant::now();
        let eps = eps0 / (offset + i) as f64;
        let before = alloc.a.clone();
        bandwidth_step(inst, &mut alloc, eps, opts.parallel)?;
        profiles = energy_step(inst, &plan, &mut alloc, opts.parallel)?;
        let mut value = objective(inst, &alloc)?;
        if opts.extrapolate {
            let mut trial = alloc.clone();
            extrapolate_bandwidth(&mut trial.a, &before, omega, eps);
            let trial_profiles = energy_step(inst, &plan, &mut trial, opts.parallel)?;
            let trial_value = objective(inst, &trial)?;
            if trial_value > value {
                alloc = trial;
                profiles = trial_profiles;
                value = trial_value;
                omega = (omega * 2.0).min(1024.0);
            } else {
                omega = 2.0;
            }
        }
        trace.values.push(value);
        trace.eps.push(eps);
        trace.iteration_secs.push(started.elapsed().as_secs_f64());
        trace.final_eps = eps;
        if (value - previous).abs() < opts.delta * previous.abs().max(f64::MIN_POSITIVE) {
            trace.termination = Termination::Tolerance;
            break;
        }
        previous = value;
    }
    if let Some(floor) = opts.refine {
        let floor = floor.min(trace.final_eps);
        // The loop stalls where links tie at equal marginal rate; the conic
        // optimum supplies the bandwidth, and exact steps restore feasibility.
        if let Ok(point) = solve_conic(inst, &plan, floor, &ReferenceOptions::default()) {
            let mut trial = Allocation {
                p: alloc.p.clone(),
                a: point.allocation.a,
            };
            energy_step(inst, &plan, &mut trial, opts.parallel)?;
            // One exact alternation step puts near-floor links on the floor.
            bandwidth_step(inst, &mut trial, floor, opts.parallel)?;
            let trial_profiles = energy_step(inst, &plan, &mut trial, opts.parallel)?;
            let trial_value = objective(inst, &trial)?;
            let current = trace.final_value();
            if trial_value > current + 1e-12 * current.abs().max(1.0) {
                alloc = trial;
                profiles = trial_profiles;
                trace.refined_value = Some(trial_value);
                trace.final_eps = floor;
            }
        }
    }
    Ok(Solution {
        allocation: alloc,
        discharge: plan,
        trace,
        profiles,
    })
}

/// Replaces the fitted split `a` by `a (a / before)^(omega - 1)`, refitted
/// onto the floored simplex.
fn extrapolate_bandwidth(a: &mut [Vec<f64>], before: &[Vec<f64>], omega: f64, eps: f64) {
    let links = a.len();
    let horizon = a.first().map_or(0, Vec::len);
    for k in 0..horizon {
        let weights: Vec<f64> = (0..links)
            .map(|m| a[m][k] * (a[m][k] / before[m][k]).powf(omega - 1.0))
            .collect();
        if let Ok(split) = fit_bandwidth(&weights, eps) {
            for m in 0..links {
                a[m][k] = split[m];
            }
        }
    }
}

/// Default cap on `K * M` for [`solve_general_stub`].
pub const REFERENCE_SIZE_LIMIT: usize = 400;

/// Allocation computed by the general-purpose reference solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelegatedSolution {
    pub allocation: Allocation,
    pub discharge: DischargePlan,
    pub objective: f64,
    pub converged: bool,
    pub quality: String,
}

/// Routes any instance, including weighted and multi-receiver ones, to the
/// reference solver at floor `eps`.
pub fn solve_general_stub(
    inst: &Instance,
    eps: f64,
    size_limit: usize,
) -> Result<DelegatedSolution, SolveError> {
    let size = inst.horizon * inst.num_receivers;
    if size > size_limit {
        return Err(SolveError::TooLarge {
            size,
            limit: size_limit,
        });
    }
    let ReferenceSolution {
        allocation,
        discharge,
        objective,
        converged,
        ..
    } = reference_solve(inst, eps, &ReferenceOptions::default())?;
    Ok(DelegatedSolution {
        allocation,
        discharge,
        objective,
        converged,
        quality: "reference-quality, small instances only".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(gains: Vec<Vec<f64>>, harvest: Vec<Vec<f64>>, p: f64, b: f64) -> Instance {
        let n = gains.len();
        Instance::point_to_point(gains, harvest, vec![p; n], vec![b; n]).unwrap()
    }

    #[test]
    fn single_link_takes_two_iterations() {
        let i = inst(
            vec![vec![1.0, 0.5, 2.0]],
            vec![vec![1.0, 3.0, 4.0]],
            10.0,
            5.0,
        );
        let sol = solve(&i, &SolveOptions::default()).unwrap();
        assert_eq!(sol.trace.iterations(), 2);
        assert!(sol.allocation.a[0].iter().all(|&a| a == 1.0));
        let ep = solve_ep(&EnergySlice {
            bandwidth: &[1.0; 3],
            gains: &i.gains[0],
            budget: &sol.discharge.effective[0],
            max_power: 10.0,
            battery_cap: 5.0,
        })
        .unwrap();
        assert_eq!(sol.allocation.p[0], ep.energy);
    }

    #[test]
    fn identical_transmitters_split_evenly() {
        let row = vec![1.0, 2.0];
        let e = vec![1.0, 2.5];
        let i = inst(vec![row.clone(), row], vec![e.clone(), e], 10.0, 10.0);
        let sol = solve(&i, &SolveOptions::default()).unwrap();
        for k in 0..2 {
            assert!((sol.allocation.a[0][k] - 0.5).abs() < 1e-12);
        }
        assert_eq!(sol.allocation.p[0], sol.allocation.p[1]);
    }

    #[test]
    fn trace_is_monotone() {
        let i = inst(
            vec![
                vec![0.3, 1.7, 0.9, 2.2],
                vec![1.4, 0.2, 1.1, 0.6],
                vec![0.8, 0.9, 2.5, 0.1],
            ],
            vec![
                vec![2.0, 2.0, 5.0, 6.0],
                vec![0.5, 3.0, 3.0, 7.0],
                vec![4.0, 4.5, 4.5, 5.0],
            ],
            3.0,
            2.5,
        );
        let sol = solve(
            &i,
            &SolveOptions {
                delta: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        let mut prev = sol.trace.initial_value;
        for &v in &sol.trace.values {
            assert!(v >= prev - 1e-9);
            prev = v;
        }
    }

    #[test]
    fn warm_start_at_fixed_point_stops_immediately() {
        let i = inst(
            vec![vec![0.3, 1.7, 0.9], vec![1.4, 0.2, 1.1]],
            vec![vec![2.0, 2.0, 5.0], vec![0.5, 3.0, 3.0]],
            3.0,
            2.5,
        );
        // Refinement moves the floor, so only the loop itself has a fixed point.
        let opts = SolveOptions {
            refine: None,
            ..SolveOptions::default()
        };
        let first = solve(&i, &opts).unwrap();
        let again = solve_warm(&i, &opts, &first.allocation, first.trace.iterations()).unwrap();
        assert_eq!(again.trace.iterations(), 1);
    }

    #[test]
    fn rejects_weighted_instance() {
        let mut i = inst(vec![vec![1.0]], vec![vec![1.0]], 1.0, 1.0);
        i.weights = vec![2.0];
        assert_eq!(
            solve(&i, &SolveOptions::default()),
            Err(SolveError::Unsupported)
        );
    }

    #[test]
    fn reference_size_limit() {
        let i = inst(vec![vec![1.0; 5]], vec![vec![1.0; 5]], 1.0, 1.0);
        assert!(matches!(
            solve_general_stub(&i, 0.01, 4),
            Err(SolveError::TooLarge { size: 5, limit: 4 })
        ));
    }
}
