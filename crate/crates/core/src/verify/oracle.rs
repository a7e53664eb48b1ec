//! Brute-force grid search over tiny point-to-point instances.
//!
//! Energies live on multiples of the resolution inside each transmitter's
//! consumption band; bandwidth shares live on the floored simplex grid
//! `{eps + j r}` with the last link taking the remainder. A dynamic program
//! over slots, keyed by the cumulative consumption of every transmitter,
//! finds the best grid point exactly.

use std::collections::HashMap;

use thiserror::Error;

use crate::discharge::greedy_discharge;
use crate::model::{link_rate, Allocation, Instance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("grid search is limited to point-to-point instances with N <= 3 and K <= 3")]
    Unsupported,
    #[error("grid search would need about {0:.3e} evaluations")]
    TooLarge(f64),
    #[error("resolution must be positive")]
    Resolution,
    #[error("no grid point is feasible")]
    NoGridPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub objective: f64,
    pub allocation: Allocation,
    /// Heuristic bound on how far the true optimum may exceed the grid best.
    pub gap: f64,
}

/// Evaluation budget of one search.
pub const GRID_LIMIT: f64 = 2e9;

/// Best bandwidth split of one slot on the floored simplex grid.
pub fn best_split(ph: &[f64], eps: f64, resolution: f64) -> (f64, Vec<f64>) {
    let n = ph.len();
    let free = 1.0 - eps * n as f64;
    let steps = (free / resolution + 1e-9).floor() as usize;
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut a = vec![eps; n];
    split_rec(ph, eps, resolution, steps, 0, 0, &mut a, &mut best);
    best
}

/// Coarse-to-fine variant of [`best_split`]: after the full grid, each of
/// `levels` rounds searches a box of two old steps around the incumbent at a
/// tenth of the step. The slot rate is steep where a share meets its floor,
/// so the plain grid can miss the optimum by more than its resolution.
pub fn best_split_zoomed(ph: &[f64], eps: f64, resolution: f64, levels: usize) -> (f64, Vec<f64>) {
    let mut best = best_split(ph, eps, resolution);
    let n = ph.len();
    if n < 2 {
        return best;
    }
    let mut res = resolution;
    for _ in 0..levels {
        let centre = best.1.clone();
        res /= 10.0;
        let mut a = vec![eps; n];
        zoom_rec(ph, eps, &centre, res, 0, &mut a, &mut best);
    }
    best
}

fn zoom_rec(
    ph: &[f64],
    eps: f64,
    centre: &[f64],
    res: f64,
    m: usize,
    a: &mut Vec<f64>,
    best: &mut (f64, Vec<f64>),
) {
    let n = ph.len();
    if m + 1 == n {
        let last = 1.0 - a[..m].iter().sum::<f64>();
        if last < eps {
            return;
        }
        a[m] = last;
        let v: f64 = (0..n).map(|j| link_rate(a[j], ph[j], 1.0)).sum();
        if v > best.0 {
            *best = (v, a.clone());
        }
        return;
    }
    for j in -20i32..=20 {
        let x = centre[m] + f64::from(j) * res;
        if x < eps {
            continue;
        }
        a[m] = x;
        zoom_rec(ph, eps, centre, res, m + 1, a, best);
    }
}

#[allow(clippy::too_many_arguments)]
fn split_rec(
    ph: &[f64],
    eps: f64,
    res: f64,
    steps: usize,
    used: usize,
    m: usize,
    a: &mut Vec<f64>,
    best: &mut (f64, Vec<f64>),
) {
    let n = ph.len();
    if m + 1 == n {
        a[m] = 1.0 - a[..m].iter().sum::<f64>();
        let v: f64 = (0..n).map(|j| link_rate(a[j], ph[j], 1.0)).sum();
        if v > best.0 {
            *best = (v, a.clone());
        }
        return;
    }
    for j in 0..=(steps - used) {
        a[m] = eps + j as f64 * res;
        split_rec(ph, eps, res, steps, used + j, m + 1, a, best);
    }
}

/// DP layer: cumulative grid state -> (value, previous state, slot draws).
type Layer = HashMap<Vec<usize>, (f64, Vec<usize>, Vec<usize>)>;

/// Exhaustive search at the given resolution with bandwidth floor `eps`.
pub fn grid_oracle(inst: &Instance, eps: f64, resolution: f64) -> Result<GridResult, OracleError> {
    if !inst.is_point_to_point() || inst.num_transmitters > 3 || inst.horizon > 3 {
        return Err(OracleError::Unsupported);
    }
    if !(resolution > 0.0) {
        return Err(OracleError::Resolution);
    }
    let n_tx = inst.num_transmitters;
    let horizon = inst.horizon;
    let plan = greedy_discharge(inst);
    let tol = 1e-9;
    // Per-transmitter admissible cumulative grid indices and per-slot draw caps.
    let mut max_idx = Vec::with_capacity(n_tx);
    let mut step_cap = Vec::with_capacity(n_tx);
    for n in 0..n_tx {
        let top = plan.effective[n][horizon - 1];
        max_idx.push((top / resolution + tol).floor() as usize);
        let cap = inst.max_power[n];
        step_cap.push(if cap.is_finite() {
            (cap / resolution + tol).floor() as usize
        } else {
            usize::MAX
        });
    }
    let states: f64 = max_idx.iter().map(|&m| (m + 1) as f64).product();
    let a_steps = ((1.0 - eps * inst.num_receivers as f64) / resolution).max(0.0) + 1.0;
    let cost = horizon as f64 * states * states + states * a_steps.powi(n_tx as i32 - 1);
    if cost > GRID_LIMIT {
        return Err(OracleError::TooLarge(cost));
    }
    let admissible = |n: usize, k: usize, idx: usize| {
        let c = idx as f64 * resolution;
        c <= plan.effective[n][k] + tol && c >= plan.effective[n][k] - inst.battery_cap[n] - tol
    };
    let mut split_cache: HashMap<(usize, Vec<usize>), (f64, Vec<f64>)> = HashMap::new();
    let mut layers: Vec<Layer> = Vec::new();
    let mut current: Layer = HashMap::new();
    current.insert(vec![0; n_tx], (0.0, vec![], vec![]));
    for k in 0..horizon {
        let mut next: Layer = HashMap::new();
        for (state, &(value, _, _)) in &current {
            let mut draw = vec![0usize; n_tx];
            loop {
                let target: Vec<usize> = (0..n_tx).map(|n| state[n] + draw[n]).collect();
                if (0..n_tx).all(|n| admissible(n, k, target[n])) {
                    let (gain, _) = split_cache
                        .entry((k, draw.clone()))
                        .or_insert_with(|| {
                            let ph: Vec<f64> = (0..n_tx)
                                .map(|n| {
                                    draw[n] as f64 * resolution * inst.gains[inst.link_of(n)][k]
                                })
                                .collect();
                            best_split(&ph, eps, resolution)
                        })
                        .clone();
                    let v = value + gain;
                    let entry = next
                        .entry(target)
                        .or_insert((f64::NEG_INFINITY, vec![], vec![]));
                    if v > entry.0 {
                        *entry = (v, state.clone(), draw.clone());
                    }
                }
                // Odometer over per-transmitter draws.
                let mut n = 0;
                loop {
                    if n == n_tx {
                        break;
                    }
                    draw[n] += 1;
                    if draw[n] <= step_cap[n] && state[n] + draw[n] <= max_idx[n] {
                        break;
                    }
                    draw[n] = 0;
                    n += 1;
                }
                if n == n_tx {
                    break;
                }
            }
        }
        if next.is_empty() {
            return Err(OracleError::NoGridPoint);
        }
        layers.push(current);
        current = next;
    }
    let (final_state, &(objective, _, _)) = current
        .iter()
        .max_by(|x, y| x.1 .0.total_cmp(&y.1 .0))
        .ok_or(OracleError::NoGridPoint)?;
    let mut allocation = Allocation::zeros(inst.num_receivers, horizon);
    let mut state = final_state.clone();
    let mut layer = current.clone();
    for k in (0..horizon).rev() {
        let (_, prev, draw) = layer[&state].clone();
        let (_, a) = &split_cache[&(k, draw.clone())];
        for n in 0..n_tx {
            let m = inst.link_of(n);
            allocation.p[m][k] = draw[n] as f64 * resolution;
            allocation.a[m][k] = a[n];
        }
        state = prev;
        layer = layers[k].clone();
    }
    let mut gap = 0.0;
    for n in 0..n_tx {
        let m = inst.link_of(n);
        let budget = inst.max_power[n].min(plan.effective[n][horizon - 1]);
        for k in 0..horizon {
            let h = inst.gains[m][k];
            gap += inst.weights[m] * (h + (budget * h / eps.max(resolution)).ln_1p());
        }
    }
    Ok(GridResult {
        objective,
        allocation,
        gap: gap * resolution,
    })
}
