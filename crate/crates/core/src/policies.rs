//! Causal adaptive water-filling and the baseline policies.
//!
//! The causal policy keeps one water level per transmitter and nudges it
//! after each slot: down by a factor `c` when the battery is full, up when it
//! is empty. Within a slot, energies follow water-filling against the current
//! level plus an adjuster that spends energy which would otherwise overflow,
//! and bandwidth is shared in proportion to received power.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bandwidth::fit_bandwidth;
use crate::discharge::{greedy_discharge, greedy_trace};
use crate::model::{Allocation, Instance};
use crate::scheduler::SolveError;
use crate::waterfill::{solve_ep, EnergySlice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Optimal,
    Causal,
    Greedy,
    Tdma,
    Equal,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Optimal,
        Policy::Causal,
        Policy::Greedy,
        Policy::Tdma,
        Policy::Equal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Optimal => "optimal",
            Policy::Causal => "causal",
            Policy::Greedy => "greedy",
            Policy::Tdma => "tdma",
            Policy::Equal => "equal",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

/// Battery levels within this distance of a bound count as empty or full.
const BOUNDARY_TOL: f64 = 1e-9;
const DAMPING: f64 = 0.5;
const FIXED_POINT_ITERS: usize = 200;
const FIXED_POINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalState {
    pub water_level: Vec<f64>,
    pub battery: Vec<f64>,
    pub factor: Vec<f64>,
}

/// Per-transmitter data of one slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotInput<'a> {
    pub harvest: &'a [f64],
    pub gains: &'a [f64],
    pub max_power: &'a [f64],
    pub battery_cap: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalStep {
    pub p: Vec<f64>,
    pub a: Vec<f64>,
    /// Energy added on top of plain water-filling to avoid overflow.
    pub adjuster: Vec<f64>,
    /// Energy lost to a full battery after the slot.
    pub overflow: Vec<f64>,
    /// False when the bandwidth fixed point failed and the split fell back to uniform.
    pub converged: bool,
}

/// Initial water level `N E[harvest] + E[1/H]` and factor `1 + P / w0`.
pub fn init_causal(
    transmitters: usize,
    mean_harvest: f64,
    mean_inverse_gain: f64,
    max_power: &[f64],
) -> CausalState {
    let w0 = transmitters as f64 * mean_harvest + mean_inverse_gain;
    CausalState {
        water_level: vec![w0; max_power.len()],
        battery: vec![0.0; max_power.len()],
        factor: max_power.iter().map(|&p| 1.0 + p / w0).collect(),
    }
}

/// Fixed initial level and factor for every transmitter.
pub fn init_causal_fixed(transmitters: usize, water_level: f64, factor: f64) -> CausalState {
    CausalState {
        water_level: vec![water_level; transmitters],
        battery: vec![0.0; transmitters],
        factor: vec![factor; transmitters],
    }
}

/// Mean of `1/max(H, h_min)`; the untruncated mean diverges for exponential gains.
pub fn truncated_inverse_gain_mean(gains: impl IntoIterator<Item = f64>, h_min: f64) -> f64 {
    let (sum, count) = gains
        .into_iter()
        .fold((0.0, 0usize), |(s, c), h| (s + 1.0 / h.max(h_min), c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn slot_energy(state: &CausalState, input: &SlotInput<'_>, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n_tx = a.len();
    let mut p = Vec::with_capacity(n_tx);
    let mut adjuster = Vec::with_capacity(n_tx);
    for n in 0..n_tx {
        let h = input.gains[n];
        let cap = input.max_power[n];
        let available = state.battery[n] + input.harvest[n];
        let fill = if h > 0.0 {
            (a[n] * (state.water_level[n] - 1.0 / h).max(0.0)).min(cap)
        } else {
            0.0
        };
        let gamma = (available - fill - input.battery_cap[n]).max(0.0);
        p.push(cap.min(available).min(fill + gamma));
        adjuster.push(gamma);
    }
    (p, adjuster)
}

fn proportional(p: &[f64], gains: &[f64]) -> Option<Vec<f64>> {
    let ph: Vec<f64> = p.iter().zip(gains).map(|(p, h)| p * h).collect();
    let total: f64 = ph.iter().sum();
    (total > 0.0).then(|| ph.iter().map(|x| x / total).collect())
}

/// One slot of the causal policy; updates `state` in place.
pub fn causal_step(state: &mut CausalState, input: &SlotInput<'_>) -> CausalStep {
    let n_tx = state.water_level.len();
    for n in 0..n_tx {
        if state.battery[n] >= input.battery_cap[n] - BOUNDARY_TOL {
            state.water_level[n] /= state.factor[n];
        }
        if state.battery[n] <= BOUNDARY_TOL {
            state.water_level[n] *= state.factor[n];
        }
    }
    let uniform = vec![1.0 / n_tx as f64; n_tx];
    let mut a = uniform.clone();
    let mut converged = false;
    for _ in 0..FIXED_POINT_ITERS {
        let (p, _) = slot_energy(state, input, &a);
        let Some(target) = proportional(&p, input.gains) else {
            a = uniform.clone();
            converged = true;
            break;
        };
        let residual = a
            .iter()
            .zip(&target)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if residual <= FIXED_POINT_TOL {
            converged = true;
            break;
        }
        for (x, y) in a.iter_mut().zip(&target) {
            *x = (1.0 - DAMPING) * *x + DAMPING * y;
        }
    }
    if !converged {
        a = uniform;
    }
    let (p, adjuster) = slot_energy(state, input, &a);
    let mut overflow = Vec::with_capacity(n_tx);
    for n in 0..n_tx {
        let level = state.battery[n] + input.harvest[n] - p[n];
        let kept = level.min(input.battery_cap[n]).max(0.0);
        overflow.push(level - kept);
        state.battery[n] = kept;
    }
    CausalStep {
        p,
        a,
        adjuster,
        overflow,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalRun {
    pub allocation: Allocation,
    /// Slots whose bandwidth split fell back to uniform.
    pub fallback_slots: Vec<usize>,
}

/// Runs the causal policy over a point-to-point instance, revealing one slot
/// of harvest and gains at a time.
pub fn causal_policy(inst: &Instance, mut state: CausalState) -> Result<CausalRun, SolveError> {
    if !inst.is_point_to_point() {
        return Err(SolveError::Unsupported);
    }
    let n_tx = inst.num_transmitters;
    let increments: Vec<Vec<f64>> = (0..n_tx).map(|n| inst.increments(n)).collect();
    let mut alloc = Allocation::zeros(inst.num_receivers, inst.horizon);
    let mut fallback_slots = Vec::new();
    for k in 0..inst.horizon {
        let harvest: Vec<f64> = (0..n_tx).map(|n| increments[n][k]).collect();
        let gains: Vec<f64> = (0..n_tx).map(|n| inst.gains[inst.link_of(n)][k]).collect();
        let step = causal_step(
            &mut state,
            &SlotInput {
                harvest: &harvest,
                gains: &gains,
                max_power: &inst.max_power,
                battery_cap: &inst.battery_cap,
            },
        );
        if !step.converged {
            fallback_slots.push(k);
        }
        for n in 0..n_tx {
            let m = inst.link_of(n);
            alloc.p[m][k] = step.p[n];
            alloc.a[m][k] = step.a[n];
        }
    }
    Ok(CausalRun {
        allocation: alloc,
        fallback_slots,
    })
}

fn greedy_energy(inst: &Instance) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; inst.horizon]; inst.num_receivers];
    for n in 0..inst.num_transmitters {
        p[inst.link_of(n)] =
            greedy_trace(&inst.increments(n), inst.max_power[n], inst.battery_cap[n]).consumption;
    }
    p
}

fn slot_ph(inst: &Instance, p: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..inst.num_receivers)
        .map(|m| p[m][k] * inst.gains[m][k])
        .collect()
}

/// Max-power energy with the bandwidth split fitted at zero floor.
pub fn greedy_policy(inst: &Instance) -> Result<Allocation, SolveError> {
    if !inst.is_point_to_point() {
        return Err(SolveError::Unsupported);
    }
    let p = greedy_energy(inst);
    let links = inst.num_receivers;
    let mut a = vec![vec![0.0; inst.horizon]; links];
    for k in 0..inst.horizon {
        let split = fit_bandwidth(&slot_ph(inst, &p, k), 0.0)
            .unwrap_or_else(|_| vec![1.0 / links as f64; links]);
        for m in 0..links {
            a[m][k] = split[m];
        }
    }
    Ok(Allocation { p, a })
}

/// Max-power energy with the whole band given to the strongest link.
pub fn tdma_greedy_policy(inst: &Instance) -> Result<Allocation, SolveError> {
    if !inst.is_point_to_point() {
        return Err(SolveError::Unsupported);
    }
    let p = greedy_energy(inst);
    let mut a = vec![vec![0.0; inst.horizon]; inst.num_receivers];
    for k in 0..inst.horizon {
        let ph = slot_ph(inst, &p, k);
        let best = (0..ph.len()).fold(0, |b, m| if ph[m] > ph[b] { m } else { b });
        a[best][k] = 1.0;
    }
    Ok(Allocation { p, a })
}

/// Equal bandwidth with each transmitter's optimal energy for that split.
pub fn equal_bandwidth_policy(inst: &Instance) -> Result<Allocation, SolveError> {
    if !inst.is_point_to_point() {
        return Err(SolveError::Unsupported);
    }
    let plan = greedy_discharge(inst);
    let mut alloc = Allocation::uniform(inst.num_receivers, inst.horizon);
    for n in 0..inst.num_transmitters {
        let m = inst.link_of(n);
        let sol = solve_ep(&EnergySlice {
            bandwidth: &alloc.a[m],
            gains: &inst.gains[m],
            budget: &plan.effective[n],
            max_power: inst.max_power[n],
            battery_cap: inst.battery_cap[n],
        })
        .map_err(|source| SolveError::Energy {
            transmitter: n,
            source,
        })?;
        alloc.p[m] = sol.energy;
    }
    Ok(alloc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::objective;

    fn one_slot<'a>(
        harvest: &'a [f64],
        gains: &'a [f64],
        p: &'a [f64],
        b: &'a [f64],
    ) -> SlotInput<'a> {
        SlotInput {
            harvest,
            gains,
            max_power: p,
            battery_cap: b,
        }
    }

    #[test]
    fn full_battery_lowers_level_first() {
        let mut s = init_causal_fixed(1, 2.2, 1.1);
        s.battery = vec![5.0];
        causal_step(&mut s, &one_slot(&[0.0], &[1.0], &[10.0], &[5.0]));
        assert!((s.water_level[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_link_closed_form() {
        let mut s = init_causal_fixed(1, 2.0, 1.1);
        s.battery = vec![3.0];
        let step = causal_step(&mut s, &one_slot(&[0.0], &[1.0], &[10.0], &[20.0]));
        assert_eq!(step.a, vec![1.0]);
        assert_eq!(step.adjuster, vec![0.0]);
        assert!((step.p[0] - 1.0).abs() < 1e-12);
        assert!((s.battery[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nothing_fills_below_inverse_gain() {
        let mut s = init_causal_fixed(2, 0.5, 1.1);
        s.battery = vec![1.0, 1.0];
        let step = causal_step(
            &mut s,
            &one_slot(&[0.0, 0.0], &[1.0, 0.5], &[10.0; 2], &[5.0; 2]),
        );
        assert_eq!(step.p, vec![0.0, 0.0]);
        assert_eq!(step.a, vec![0.5, 0.5]);
    }

    #[test]
    fn adjuster_absorbs_overflow() {
        let mut s = init_causal_fixed(1, 1.5, 1.1);
        s.battery = vec![1.0];
        let step = causal_step(&mut s, &one_slot(&[6.0], &[1.0], &[10.0], &[5.0]));
        // Fill 0.5, available 7: adjuster 1.5 keeps the battery at capacity.
        assert!((step.adjuster[0] - 1.5).abs() < 1e-12);
        assert!((step.p[0] - 2.0).abs() < 1e-12);
        assert_eq!(s.battery, vec![5.0]);
    }

    #[test]
    fn two_link_fixed_point() {
        let mut s = init_causal_fixed(2, 3.0, 1.1);
        s.battery = vec![4.0, 4.0];
        let gains = [2.0, 0.8];
        let step = causal_step(
            &mut s,
            &one_slot(&[0.0, 0.0], &gains, &[10.0; 2], &[5.0; 2]),
        );
        assert!(step.converged);
        let target = proportional(&step.p, &gains).unwrap();
        assert!(step
            .a
            .iter()
            .zip(&target)
            .all(|(x, y)| (x - y).abs() <= 1e-8));
        assert!((step.a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn initializer_formula() {
        let s = init_causal(4, 4.0, 2.0, &[9.0, 0.0]);
        assert_eq!(s.water_level, vec![18.0, 18.0]);
        assert!((s.factor[0] - 1.5).abs() < 1e-12);
        assert_eq!(s.factor[1], 1.0);
    }

    fn two_tx(harvest: Vec<Vec<f64>>) -> Instance {
        Instance::point_to_point(
            vec![vec![1.2, 0.4], vec![0.7, 1.5]],
            harvest,
            vec![10.0, 10.0],
            vec![20.0, 20.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_harvest_gives_zero_everywhere() {
        let inst = two_tx(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        for alloc in [
            greedy_policy(&inst).unwrap(),
            tdma_greedy_policy(&inst).unwrap(),
            equal_bandwidth_policy(&inst).unwrap(),
            causal_policy(&inst, init_causal_fixed(2, 25.0, 1.1))
                .unwrap()
                .allocation,
        ] {
            assert_eq!(objective(&inst, &alloc).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_link_baselines_use_whole_band() {
        let inst = Instance::point_to_point(
            vec![vec![1.0, 0.3, 2.0]],
            vec![vec![2.0, 5.0, 6.0]],
            vec![3.0],
            vec![4.0],
        )
        .unwrap();
        let g = greedy_policy(&inst).unwrap();
        let t = tdma_greedy_policy(&inst).unwrap();
        let e = equal_bandwidth_policy(&inst).unwrap();
        for alloc in [&g, &t, &e] {
            assert!(alloc.a[0].iter().all(|&a| a == 1.0));
        }
        assert_eq!(g.p, t.p);
        assert!(objective(&inst, &e).unwrap() >= objective(&inst, &g).unwrap() - 1e-12);
    }

    #[test]
    fn tdma_ties_go_to_lowest_index() {
        let inst = Instance::point_to_point(
            vec![vec![1.0], vec![1.0]],
            vec![vec![2.0], vec![2.0]],
            vec![10.0, 10.0],
            vec![5.0, 5.0],
        )
        .unwrap();
        let t = tdma_greedy_policy(&inst).unwrap();
        assert_eq!(t.a, vec![vec![1.0], vec![0.0]]);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("nope".parse::<Policy>().is_err());
    }
}
