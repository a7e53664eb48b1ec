//! First-stage discharge planning.
//!
//! Every transmitter is simulated at maximum usable power; whatever still
//! overflows the battery is discharged. The resulting plan wastes the least
//! total energy, which leaves the widest consumption band for the
//! second-stage problem.

use crate::model::{band_reachable, increments, DischargePlan, Instance};

/// Slot-by-slot record of the max-power simulation of one transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrace {
    pub consumption: Vec<f64>,
    pub discharge: Vec<f64>,
    pub battery: Vec<f64>,
}

/// Simulates one transmitter drawing `min(P, available)` every slot.
pub fn greedy_trace(deltas: &[f64], max_power: f64, battery_cap: f64) -> GreedyTrace {
    let mut level = 0.0f64;
    let mut trace = GreedyTrace {
        consumption: Vec::with_capacity(deltas.len()),
        discharge: Vec::with_capacity(deltas.len()),
        battery: Vec::with_capacity(deltas.len()),
    };
    for &delta in deltas {
        let available = level + delta;
        let used = max_power.min(available);
        let waste = (available - used - battery_cap).max(0.0);
        level = available - used - waste;
        trace.consumption.push(used);
        trace.discharge.push(waste);
        trace.battery.push(level);
    }
    trace
}

pub fn greedy_discharge(inst: &Instance) -> DischargePlan {
    let discharge = (0..inst.num_transmitters)
        .map(|n| {
            greedy_trace(&inst.increments(n), inst.max_power[n], inst.battery_cap[n]).discharge
        })
        .collect();
    DischargePlan::from_discharge(inst, discharge)
}

/// Smallest total discharge over all plans whose entries lie on a grid of
/// spacing `resolution`, found by exhaustive search. `None` when no grid
/// plan is feasible.
///
/// A plan is feasible when some consumption path with per-slot draw in
/// `[0, P]` keeps the battery in `[0, B_max]`.
pub fn min_discharge_on_grid(
    deltas: &[f64],
    max_power: f64,
    battery_cap: f64,
    resolution: f64,
) -> Option<f64> {
    assert!(resolution > 0.0, "resolution must be positive");
    let cumulative: Vec<f64> = deltas
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect();
    let mut best: Option<f64> = None;
    let mut effective = Vec::with_capacity(deltas.len());
    search(
        &cumulative,
        max_power,
        battery_cap,
        resolution,
        0,
        0.0,
        &mut effective,
        &mut best,
    );
    best
}

#[allow(clippy::too_many_arguments)]
fn search(
    cumulative: &[f64],
    max_power: f64,
    battery_cap: f64,
    resolution: f64,
    slot: usize,
    wasted: f64,
    effective: &mut Vec<f64>,
    best: &mut Option<f64>,
) {
    let upper: Vec<f64> = effective.clone();
    let lower: Vec<f64> = upper.iter().map(|e| e - battery_cap).collect();
    if band_reachable(&lower, &upper, max_power, 1e-12).is_err() {
        return;
    }
    if best.is_some_and(|b| wasted >= b) {
        return;
    }
    if slot == cumulative.len() {
        *best = Some(wasted);
        return;
    }
    let room = cumulative[slot] - wasted;
    let steps = (room / resolution + 1e-9).floor() as usize;
    for j in 0..=steps {
        let d = j as f64 * resolution;
        effective.push(cumulative[slot] - wasted - d);
        search(
            cumulative,
            max_power,
            battery_cap,
            resolution,
            slot + 1,
            wasted + d,
            effective,
            best,
        );
        effective.pop();
    }
}

/// Checks a plan against the grid-enumeration minimum for every transmitter.
///
/// The plan must be feasible and waste no more than the best grid plan. For
/// instances whose data lie on the grid this is exact minimality.
pub fn discharge_is_minimal(inst: &Instance, plan: &DischargePlan, resolution: f64) -> bool {
    (0..inst.num_transmitters).all(|n| {
        let (lower, upper) = plan.band(inst, n);
        if plan.discharge[n].iter().any(|&d| d < 0.0)
            || band_reachable(&lower, &upper, inst.max_power[n], 1e-9).is_err()
        {
            return false;
        }
        let total: f64 = plan.discharge[n].iter().sum();
        match min_discharge_on_grid(
            &increments(&inst.harvest[n]),
            inst.max_power[n],
            inst.battery_cap[n],
            resolution,
        ) {
            Some(best) => total <= best + 1e-9,
            None => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(deltas: &[f64], p: f64, b: f64) -> Instance {
        let e: Vec<f64> = deltas
            .iter()
            .scan(0.0, |a, d| {
                *a += d;
                Some(*a)
            })
            .collect();
        Instance::point_to_point(vec![vec![1.0; e.len()]], vec![e], vec![p], vec![b]).unwrap()
    }

    #[test]
    fn no_waste_when_battery_absorbs() {
        let t = greedy_trace(&[3.0, 6.0, 0.0], 2.0, 5.0);
        assert_eq!(t.discharge, vec![0.0, 0.0, 0.0]);
        assert_eq!(t.battery, vec![1.0, 5.0, 3.0]);
    }

    #[test]
    fn overflow_is_discharged() {
        let t = greedy_trace(&[10.0], 2.0, 5.0);
        assert_eq!(t.consumption, vec![2.0]);
        assert_eq!(t.discharge, vec![3.0]);
        assert_eq!(t.battery, vec![5.0]);
        let inst = single(&[10.0], 2.0, 5.0);
        let plan = greedy_discharge(&inst);
        assert_eq!(plan.effective, vec![vec![7.0]]);
    }

    #[test]
    fn zero_harvest() {
        let inst = single(&[0.0, 0.0, 0.0], 2.0, 5.0);
        let plan = greedy_discharge(&inst);
        assert_eq!(plan.discharge, vec![vec![0.0; 3]]);
        assert_eq!(plan.effective, vec![vec![0.0; 3]]);
        assert!(discharge_is_minimal(&inst, &plan, 0.5));
    }

    #[test]
    fn grid_minimum_matches_greedy() {
        assert_eq!(min_discharge_on_grid(&[10.0], 2.0, 5.0, 0.5), Some(3.0));
        let inst = single(&[10.0], 2.0, 5.0);
        assert!(discharge_is_minimal(&inst, &greedy_discharge(&inst), 0.5));
    }

    #[test]
    fn extra_discharge_is_not_minimal() {
        let inst = single(&[3.0, 6.0, 0.0], 2.0, 5.0);
        let mut d = greedy_discharge(&inst).discharge;
        d[0][1] += 1.0;
        let plan = DischargePlan::from_discharge(&inst, d);
        assert!(!discharge_is_minimal(&inst, &plan, 0.5));
    }

    #[test]
    fn idempotent_on_effective_budget() {
        let inst = single(&[4.0, 9.0, 1.0, 7.0], 3.0, 4.0);
        let plan = greedy_discharge(&inst);
        let again = Instance::point_to_point(
            inst.gains.clone(),
            plan.effective.clone(),
            inst.max_power.clone(),
            inst.battery_cap.clone(),
        )
        .unwrap();
        assert!(greedy_discharge(&again)
            .discharge
            .iter()
            .flatten()
            .all(|&d| d == 0.0));
    }
}
