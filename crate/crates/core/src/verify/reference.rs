//! General-purpose reference solver for the joint energy-bandwidth problem
//! with bandwidth floor `eps`.
//!
//! The floored problem is concave and its rate terms are exponential-cone
//! representable: `t <= a ln(1 + pH/a)` iff `(t, a, a + pH)` lies in the
//! exponential cone. An interior-point solve of that program handles weighted
//! and multi-receiver instances. The returned point is nudged back inside the
//! constraints, since interior-point iterates are feasible only up to the
//! solver tolerance.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discharge::greedy_discharge;
use crate::model::{objective, Allocation, DischargePlan, Instance, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error("bandwidth floor {0} must lie in (0, 1/M]")]
    InvalidFloor(f64),
    #[error("interior-point solver failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptions {
    /// Interior-point iteration cap.
    pub max_iters: u32,
    /// Duality-gap and feasibility tolerance of the interior-point solve.
    pub tolerance: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            max_iters: 200,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub allocation: Allocation,
    pub discharge: DischargePlan,
    pub objective: f64,
    pub iterations: usize,
    /// False when the solver stopped short of its tolerance; the last
    /// iterate is returned.
    pub converged: bool,
}

/// Euclidean projection onto `{x >= 0, sum x = total}`.
pub(crate) fn project_simplex(y: &mut [f64], total: f64) {
    let mut sorted: Vec<f64> = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut shift = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        acc += v;
        let t = (acc - total) / (i + 1) as f64;
        if v - t > 0.0 {
            shift = t;
        }
    }
    for v in y.iter_mut() {
        *v = (*v - shift).max(0.0);
    }
}

/// Projection onto `{x >= eps, sum x = 1}`.
pub(crate) fn project_floored_simplex(y: &mut [f64], eps: f64) {
    for v in y.iter_mut() {
        *v -= eps;
    }
    project_simplex(y, 1.0 - eps * y.len() as f64);
    for v in y.iter_mut() {
        *v += eps;
    }
}

/// Interior-point optimum of the floored problem; bandwidth columns are
/// projected onto the floored simplex, energies are left as solved.
pub(crate) struct ConicPoint {
    pub allocation: Allocation,
    pub solved: bool,
    pub iterations: usize,
}

/// Solves the floored problem as an exponential-cone program. Variables are
/// `(t, p, a)` per link and slot.
pub(crate) fn solve_conic(
    inst: &Instance,
    plan: &DischargePlan,
    eps: f64,
    opts: &ReferenceOptions,
) -> Result<ConicPoint, ReferenceError> {
    let links = inst.num_receivers;
    let horizon = inst.horizon;
    let var = |m: usize, k: usize| 3 * (m * horizon + k);
    let nvars = 3 * links * horizon;

    let (mut rows, mut cols, mut vals, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut row = 0;
    let mut push = |r: usize, c: usize, v: f64| {
        rows.push(r);
        cols.push(c);
        vals.push(v);
    };

    // Every slot's bandwidth sums to one.
    for k in 0..horizon {
        for m in 0..links {
            push(row, var(m, k) + 2, 1.0);
        }
        b.push(1.0);
        row += 1;
    }
    let zero_rows = row;

    for m in 0..links {
        for k in 0..horizon {
            let v = var(m, k);
            push(row, v + 1, -1.0);
            push(row + 1, v + 2, -1.0);
            b.extend([0.0, -eps]);
            row += 2;
        }
    }
    for n in 0..inst.num_transmitters {
        let owned = &inst.receiver_map[n];
        if inst.max_power[n].is_finite() {
            for k in 0..horizon {
                for &m in owned {
                    push(row, var(m, k) + 1, 1.0);
                }
                b.push(inst.max_power[n]);
                row += 1;
            }
        }
        let (lower, upper) = plan.band(inst, n);
        for k in 0..horizon {
            for &m in owned {
                for j in 0..=k {
                    push(row, var(m, j) + 1, 1.0);
                    push(row + 1, var(m, j) + 1, -1.0);
                }
            }
            b.extend([upper[k], -lower[k]]);
            row += 2;
        }
    }
    let nonneg_rows = row - zero_rows;

    for m in 0..links {
        for k in 0..horizon {
            let v = var(m, k);
            push(row, v, -1.0);
            push(row + 1, v + 2, -1.0);
            push(row + 2, v + 2, -1.0);
            push(row + 2, v + 1, -inst.gains[m][k]);
            b.extend([0.0, 0.0, 0.0]);
            row += 3;
        }
    }

    let a_mat = CscMatrix::new_from_triplets(row, nvars, rows, cols, vals);
    let p_mat = CscMatrix::zeros((nvars, nvars));
    let mut q = vec![0.0; nvars];
    for m in 0..links {
        for k in 0..horizon {
            q[var(m, k)] = -inst.weights[m];
        }
    }
    let mut cones = vec![
        SupportedConeT::ZeroConeT(zero_rows),
        SupportedConeT::NonnegativeConeT(nonneg_rows),
    ];
    cones.extend((0..links * horizon).map(|_| SupportedConeT::ExponentialConeT()));

    let settings = DefaultSettings {
        verbose: false,
        max_iter: opts.max_iters,
        tol_gap_abs: opts.tolerance,
        tol_gap_rel: opts.tolerance,
        tol_feas: opts.tolerance,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings)
        .map_err(|e| ReferenceError::Solver(format!("{e:?}")))?;
    solver.solve();
    let status = solver.solution.status;
    let x = &solver.solution.x;
    if !matches!(
        status,
        SolverStatus::Solved
            | SolverStatus::AlmostSolved
            | SolverStatus::MaxIterations
            | SolverStatus::MaxTime
    ) || x.iter().any(|v| !v.is_finite())
    {
        return Err(ReferenceError::Solver(format!("{status:?}")));
    }
    let mut allocation = Allocation::zeros(links, horizon);
    let mut col = vec![0.0; links];
    for k in 0..horizon {
        for m in 0..links {
            allocation.p[m][k] = x[var(m, k) + 1];
            col[m] = x[var(m, k) + 2];
        }
        project_floored_simplex(&mut col, eps);
        for m in 0..links {
            allocation.a[m][k] = col[m];
        }
    }
    Ok(ConicPoint {
        allocation,
        solved: status == SolverStatus::Solved,
        iterations: solver.solution.iterations as usize,
    })
}

/// Clips energies into `[0, P]` per slot and below the cumulative budget.
/// Interior-point iterates overshoot by about the solver tolerance.
fn repair_energy(inst: &Instance, plan: &DischargePlan, alloc: &mut Allocation) {
    for n in 0..inst.num_transmitters {
        let owned = &inst.receiver_map[n];
        let mut consumed = 0.0;
        for k in 0..inst.horizon {
            let mut slot: f64 = 0.0;
            for &m in owned {
                alloc.p[m][k] = alloc.p[m][k].max(0.0);
                slot += alloc.p[m][k];
            }
            let limit = inst.max_power[n]
                .min(plan.effective[n][k] - consumed)
                .max(0.0);
            if slot > limit {
                let scale = limit / slot;
                for &m in owned {
                    alloc.p[m][k] *= scale;
                }
                slot = limit;
            }
            consumed += slot;
        }
    }
}

/// Maximizes the weighted sum rate over the floored problem.
pub fn reference_solve(
    inst: &Instance,
    eps: f64,
    opts: &ReferenceOptions,
) -> Result<ReferenceSolution, ReferenceError> {
    if !(eps > 0.0) || eps * inst.num_receivers as f64 > 1.0 + 1e-12 {
        return Err(ReferenceError::InvalidFloor(eps));
    }
    let plan = greedy_discharge(inst);
    let ConicPoint {
        mut allocation,
        solved,
        iterations,
    } = solve_conic(inst, &plan, eps, opts)?;
    repair_energy(inst, &plan, &mut allocation);
    let value = objective(inst, &allocation)?;
    Ok(ReferenceSolution {
        allocation,
        discharge: plan,
        objective: value,
        iterations,
        converged: solved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_feasible_tol;
    use crate::verify::kkt::kkt_residual;

    #[test]
    fn simplex_projection() {
        let mut y = vec![0.9, 0.6, -0.2];
        project_simplex(&mut y, 1.0);
        assert!((y[0] - 0.65).abs() < 1e-12 && (y[1] - 0.35).abs() < 1e-12 && y[2] == 0.0);
        let mut z = vec![0.0, 0.0];
        project_floored_simplex(&mut z, 0.1);
        assert!((z[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_gives_zero() {
        let inst = Instance::point_to_point(
            vec![vec![1.0, 2.0], vec![0.5, 1.0]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let sol = reference_solve(&inst, 0.01, &ReferenceOptions::default()).unwrap();
        assert!(sol.objective.abs() < 1e-12);
        assert!(sol.allocation.p.iter().flatten().all(|&p| p.abs() < 1e-12));
    }

    #[test]
    fn single_link_matches_closed_form() {
        let inst =
            Instance::point_to_point(vec![vec![1.0]], vec![vec![1.0]], vec![10.0], vec![5.0])
                .unwrap();
        let sol = reference_solve(&inst, 0.5, &ReferenceOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.objective - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn weighted_multi_receiver_optimum_is_certified() {
        // Transmitter 0 serves receivers 0 and 1; transmitter 1 serves receiver 2.
        let inst = Instance::new(
            2,
            3,
            2,
            vec![vec![0, 1], vec![2]],
            vec![vec![1.0, 0.4], vec![0.7, 1.5], vec![0.9, 0.9]],
            vec![vec![1.0, 2.0], vec![0.5, 1.5]],
            vec![1.5, 1.0],
            vec![1.0, 1.0],
            vec![2.0, 1.0, 1.0],
        )
        .unwrap();
        let eps = 0.01;
        let sol = reference_solve(&inst, eps, &ReferenceOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(check_feasible_tol(&inst, &sol.discharge, &sol.allocation, eps, 1e-9).is_empty());
        let report = kkt_residual(&inst, &sol.discharge, &sol.allocation, eps).unwrap();
        assert!(report.max_residual <= 1e-4, "{}", report.max_residual);
    }

    #[test]
    fn rejects_bad_floor() {
        let inst =
            Instance::point_to_point(vec![vec![1.0]], vec![vec![1.0]], vec![10.0], vec![5.0])
                .unwrap();
        assert!(reference_solve(&inst, 0.0, &ReferenceOptions::default()).is_err());
    }
}
