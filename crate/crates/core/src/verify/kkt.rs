//! KKT certification of an allocation for the floored problem.
//!
//! Duals are recovered from the primal alone. On the energy side, each slot
//! admits an interval of water levels `w = 1/nu` consistent with its energy
//! (within a residual `r`); the battery trajectory decides where the level
//! may rise (empty battery) or fall (full battery). The smallest `r` for which
//! a consistent level sequence exists is the energy stationarity residual,
//! and the sequence itself yields the battery duals. On the bandwidth side,
//! the marginal rate of every active link must equal a common price, while
//! floored links may only sit below it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_feasible_tol, Allocation, DischargePlan, Instance, Violation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KktError {
    #[error("allocation is infeasible: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Infeasible(Vec<Violation>),
}

/// Residual of every KKT condition family; all entries are nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Energy stationarity, in energy units.
    pub stationarity_energy: f64,
    /// Bandwidth stationarity, in nats.
    pub stationarity_bandwidth: f64,
    pub slackness_lambda: f64,
    pub slackness_mu: f64,
    pub slackness_alpha: f64,
    pub slackness_beta: f64,
    pub dual_feasibility: f64,
    pub max_residual: f64,
    pub tolerance: f64,
    pub certified: bool,
    /// Recovered water level of every transmitter and slot (`inf` when every
    /// link of the slot is capped with spare energy).
    pub water_levels: Vec<Vec<f64>>,
}

/// Default certification tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Feasibility slack accepted before refusing to certify.
const FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    const ALL: Interval = Interval {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    fn intersect(self, o: Interval) -> Interval {
        Interval {
            lo: self.lo.max(o.lo),
            hi: self.hi.min(o.hi),
        }
    }
}

struct SlotLinks {
    p: Vec<f64>,
    a: Vec<f64>,
    h: Vec<f64>,
    w: Vec<f64>,
    cap: f64,
}

impl SlotLinks {
    fn rate(&self, j: usize) -> bool {
        self.a[j] > 0.0 && self.h[j] > 0.0
    }

    /// Per-link energy at level `w` (finite), with the slot cap enforced by
    /// lowering the level of the slot to the capping level.
    fn fill(&self, w: f64) -> Vec<f64> {
        let raw = |level: f64| -> Vec<f64> {
            (0..self.p.len())
                .map(|j| {
                    if self.rate(j) {
                        self.a[j] * (self.w[j] * level - 1.0 / self.h[j]).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let at = raw(w);
        if !self.cap.is_finite() || at.iter().sum::<f64>() <= self.cap {
            return at;
        }
        let (mut lo, mut hi) = (0.0, w);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if raw(mid).iter().sum::<f64>() <= self.cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        raw(lo)
    }

    /// Levels `w` at which every link is within `r` of its fill.
    fn interval(&self, r: f64) -> Interval {
        let mut out = Interval::ALL;
        let rate_links: Vec<usize> = (0..self.p.len()).filter(|&j| self.rate(j)).collect();
        for j in 0..self.p.len() {
            if !self.rate(j) && self.p[j] > r {
                // Energy on a zero-rate link is only justified at a zero price.
                if !rate_links.is_empty() {
                    return Interval { lo: 1.0, hi: 0.0 };
                }
                out.lo = f64::INFINITY;
            }
        }
        if rate_links.is_empty() {
            return out;
        }
        if self.p.len() == 1 {
            let (p, a, h, w) = (self.p[0], self.a[0], self.h[0], self.w[0]);
            let lo = if p - r <= 0.0 {
                0.0
            } else if p - r > self.cap {
                f64::INFINITY
            } else {
                ((p - r) / a + 1.0 / h) / w
            };
            let hi = if p + r < 0.0 {
                -1.0
            } else if p + r >= self.cap {
                f64::INFINITY
            } else {
                ((p + r) / a + 1.0 / h) / w
            };
            return out.intersect(Interval { lo, hi });
        }
        let at_infinity = self.fill_at_infinity();
        let above = |f: &[f64]| rate_links.iter().all(|&j| f[j] >= self.p[j] - r);
        let below = |f: &[f64]| rate_links.iter().all(|&j| f[j] <= self.p[j] + r);
        // Beyond this level every uncapped link exceeds its energy by more than r.
        let top = rate_links
            .iter()
            .map(|&j| ((self.p[j] + r) / self.a[j] + 1.0 / self.h[j]) / self.w[j])
            .fold(1.0, f64::max)
            * 2.0;
        let lo = if above(&self.fill(0.0)) {
            0.0
        } else if !above(&at_infinity) {
            f64::INFINITY
        } else {
            bisect(0.0, top, |w| above(&self.fill(w)))
        };
        let hi = if !below(&self.fill(0.0)) {
            -1.0
        } else if below(&at_infinity) {
            f64::INFINITY
        } else {
            bisect(0.0, top, |w| !below(&self.fill(w)))
        };
        out.intersect(Interval { lo, hi })
    }

    fn fill_at_infinity(&self) -> Vec<f64> {
        if !self.cap.is_finite() {
            return vec![f64::INFINITY; self.p.len()];
        }
        let mut top = 1.0;
        while self.fill(top).iter().sum::<f64>() < self.cap * (1.0 - 1e-15) && top < 1e300 {
            top *= 2.0;
        }
        self.fill(top)
    }
}

/// Smallest `w` in `[lo, hi]` where the monotone predicate turns true.
fn bisect(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

struct EnergyBlock {
    slots: Vec<SlotLinks>,
    empty: Vec<bool>,
    full: Vec<bool>,
}

impl EnergyBlock {
    /// Forward pass: the admissible level set after every slot, or `None`.
    fn sweep(&self, r: f64) -> Option<Vec<Interval>> {
        let mut sets = Vec::with_capacity(self.slots.len());
        let mut prev: Option<(Interval, bool, bool)> = None;
        for (k, slot) in self.slots.iter().enumerate() {
            let mut s = slot.interval(r);
            if let Some((ps, empty, full)) = prev {
                let reach = match (empty, full) {
                    (true, true) => Interval::ALL,
                    (true, false) => Interval {
                        lo: ps.lo,
                        hi: f64::INFINITY,
                    },
                    (false, true) => Interval { lo: 0.0, hi: ps.hi },
                    (false, false) => ps,
                };
                s = s.intersect(reach);
            }
            if s.is_empty() {
                return None;
            }
            sets.push(s);
            prev = Some((s, self.empty[k], self.full[k]));
        }
        let last = self.slots.len().checked_sub(1)?;
        if !self.empty[last] && sets[last].hi < f64::INFINITY {
            return None;
        }
        Some(sets)
    }

    /// Backward pass choosing one level per slot.
    fn levels(&self, sets: &[Interval]) -> Vec<f64> {
        let k_total = sets.len();
        let mut w = vec![0.0; k_total];
        let last = sets[k_total - 1];
        if !self.empty[k_total - 1] {
            w[k_total - 1] = f64::INFINITY;
        } else if last.hi.is_finite() {
            w[k_total - 1] = last.hi;
        } else {
            w[k_total - 1] = if last.lo > 0.0 {
                last.lo
            } else {
                f64::INFINITY
            };
        }
        for k in (0..k_total - 1).rev() {
            let s = sets[k];
            let next = w[k + 1];
            w[k] = match (self.empty[k], self.full[k]) {
                (true, true) => next.clamp(s.lo, s.hi),
                (true, false) => next.min(s.hi),
                (false, true) => next.max(s.lo),
                (false, false) => next,
            };
        }
        w
    }
}

/// Certifies `alloc` for the problem with bandwidth floor `eps`.
pub fn kkt_residual(
    inst: &Instance,
    plan: &DischargePlan,
    alloc: &Allocation,
    eps: f64,
) -> Result<KktReport, KktError> {
    kkt_residual_tol(inst, plan, alloc, eps, DEFAULT_TOLERANCE)
}

pub fn kkt_residual_tol(
    inst: &Instance,
    plan: &DischargePlan,
    alloc: &Allocation,
    eps: f64,
    tolerance: f64,
) -> Result<KktReport, KktError> {
    let violations = check_feasible_tol(inst, plan, alloc, eps, FEASIBILITY_TOL);
    if !violations.is_empty() {
        return Err(KktError::Infeasible(violations));
    }
    let mut report = KktReport {
        stationarity_energy: 0.0,
        stationarity_bandwidth: 0.0,
        slackness_lambda: 0.0,
        slackness_mu: 0.0,
        slackness_alpha: 0.0,
        slackness_beta: 0.0,
        dual_feasibility: 0.0,
        max_residual: 0.0,
        tolerance,
        certified: false,
        water_levels: Vec::with_capacity(inst.num_transmitters),
    };
    for n in 0..inst.num_transmitters {
        energy_side(inst, plan, alloc, n, &mut report);
    }
    for k in 0..inst.horizon {
        bandwidth_side(inst, alloc, eps, k, &mut report);
    }
    report.max_residual = [
        report.stationarity_energy,
        report.stationarity_bandwidth,
        report.slackness_lambda,
        report.slackness_mu,
        report.slackness_alpha,
        report.slackness_beta,
        report.dual_feasibility,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    report.certified = report.max_residual <= tolerance;
    Ok(report)
}

fn energy_side(
    inst: &Instance,
    plan: &DischargePlan,
    alloc: &Allocation,
    n: usize,
    report: &mut KktReport,
) {
    let links = &inst.receiver_map[n];
    let cap = inst.battery_cap[n];
    let consumption = alloc.transmitter_energy(inst, n);
    let budget = &plan.effective[n];
    let scale = budget.last().copied().unwrap_or(0.0).max(1.0);
    let battery_tol = 1e-7 * scale;
    let mut cum = 0.0;
    let battery: Vec<f64> = consumption
        .iter()
        .zip(budget)
        .map(|(c, e)| {
            cum += c;
            e - cum
        })
        .collect();
    let block = EnergyBlock {
        slots: (0..inst.horizon)
            .map(|k| SlotLinks {
                p: links.iter().map(|&m| alloc.p[m][k]).collect(),
                a: links.iter().map(|&m| alloc.a[m][k]).collect(),
                h: links.iter().map(|&m| inst.gains[m][k]).collect(),
                w: links.iter().map(|&m| inst.weights[m]).collect(),
                cap: inst.max_power[n],
            })
            .collect(),
        empty: battery.iter().map(|&b| b <= battery_tol).collect(),
        full: battery.iter().map(|&b| b >= cap - battery_tol).collect(),
    };
    let max_p = consumption.iter().copied().fold(0.0, f64::max);
    let finite_cap = if inst.max_power[n].is_finite() {
        inst.max_power[n]
    } else {
        0.0
    };
    let mut hi = max_p + finite_cap + scale;
    let Some(mut sets) = block.sweep(hi) else {
        report.stationarity_energy = report.stationarity_energy.max(hi);
        report.water_levels.push(vec![f64::NAN; inst.horizon]);
        return;
    };
    let mut lo = 0.0;
    if let Some(s) = block.sweep(0.0) {
        sets = s;
        hi = 0.0;
    } else {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            match block.sweep(mid) {
                Some(s) => {
                    sets = s;
                    hi = mid;
                }
                None => lo = mid,
            }
        }
    }
    report.stationarity_energy = report.stationarity_energy.max(hi);
    let levels = block.levels(&sets);
    let price: Vec<f64> = levels.iter().map(|&w| 1.0 / w).collect();
    for k in 0..inst.horizon {
        let next = price.get(k + 1).copied().unwrap_or(0.0);
        let change = price[k] - next;
        let lambda = change.max(0.0);
        let mu = (-change).max(0.0);
        if lambda.is_finite() {
            report.slackness_lambda = report.slackness_lambda.max(lambda * battery[k].max(0.0));
        }
        if mu.is_finite() {
            report.slackness_mu = report.slackness_mu.max(mu * (cap - battery[k]).max(0.0));
        }
    }
    report.water_levels.push(levels);
}

/// Bandwidth side of one slot. The price `alpha` and the floor duals
/// `beta_m = (alpha - g_m)^+` are chosen to minimize the worst of the
/// stationarity residual `(g_m - alpha)^+` and the slackness `beta_m (a_m - eps)`.
fn bandwidth_side(inst: &Instance, alloc: &Allocation, eps: f64, k: usize, report: &mut KktReport) {
    let links = inst.num_receivers;
    let marginal: Vec<f64> = (0..links)
        .map(|m| {
            let a = alloc.a[m][k];
            if a <= 0.0 {
                return 0.0;
            }
            let x = alloc.p[m][k] * inst.gains[m][k] / a;
            inst.weights[m] * (x.ln_1p() - x / (1.0 + x))
        })
        .collect();
    let slack: Vec<f64> = (0..links).map(|m| (alloc.a[m][k] - eps).abs()).collect();
    let residuals = |alpha: f64| {
        let mut stationarity = 0.0f64;
        let mut slackness = 0.0f64;
        for m in 0..links {
            stationarity = stationarity.max(marginal[m] - alpha);
            slackness = slackness.max((alpha - marginal[m]).max(0.0) * slack[m]);
        }
        (stationarity, slackness)
    };
    let worst = |alpha: f64| {
        let (s, c) = residuals(alpha);
        s.max(c)
    };
    // Convex in alpha: ternary search between the smallest and largest marginal.
    let mut lo = marginal.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = marginal.iter().copied().fold(0.0, f64::max);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if worst(m1) <= worst(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let (stationarity, slackness) = residuals(alpha);
    report.stationarity_bandwidth = report.stationarity_bandwidth.max(stationarity);
    report.slackness_beta = report.slackness_beta.max(slackness);
    let total: f64 = (0..links).map(|m| alloc.a[m][k]).sum();
    report.slackness_alpha = report
        .slackness_alpha
        .max(alpha.abs() * (total - 1.0).abs());
}
