//! Discounted dynamic water-filling for one transmitter's energy subproblem.
//!
//! Given bandwidth shares `a[k]`, the optimal energy follows
//! `p[k] = min(P, a[k] (w - 1/H[k])^+)` with a water level `w` that is
//! constant on segments. The level may rise only where the battery runs
//! empty (BDP) and fall only where it is full (BFP).
//!
//! Segments are found by a taut-string sweep over the cumulative-consumption
//! band `[E~ - B_max, E~]`: from the current boundary, every candidate end
//! slot `e` yields an interval of admissible levels (the levels that keep the
//! cumulative fill inside the band at `e`). The sweep extends the segment
//! while those intervals still intersect; when they stop intersecting the
//! segment is closed at the slot whose bound is binding. Fill curves are
//! piecewise linear in the level, so they are inverted exactly.
//!
//! Slots with zero rate (`H = 0` or `a = 0`) receive energy only once every
//! rate-bearing slot of the transmitter is capped; this is modelled as an
//! extension of the level axis beyond the saturation level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::band_reachable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaterfillError {
    #[error("segment target {target} outside [0, {capacity}]")]
    InfeasibleSegment { target: f64, capacity: f64 },
    #[error("consumption band is empty at slot {slot}")]
    EmptyBand { slot: usize },
    #[error("input slices have mismatched lengths")]
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryKind {
    #[serde(rename = "BDP")]
    Depletion,
    #[serde(rename = "BFP")]
    Full,
    #[serde(rename = "END")]
    HorizonEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    /// 1-based slot index of the last slot in the segment.
    pub slot: usize,
    pub kind: BoundaryKind,
}

/// Segment boundaries and water levels of one transmitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProfile {
    pub boundaries: Vec<Boundary>,
    pub water_levels: Vec<f64>,
}

impl SegmentProfile {
    /// 0-based half-open slot ranges of the segments.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.boundaries
            .iter()
            .map(|b| {
                let r = start..b.slot;
                start = b.slot;
                r
            })
            .collect()
    }

    /// Water level of every slot.
    pub fn slot_levels(&self) -> Vec<f64> {
        self.segments()
            .into_iter()
            .zip(&self.water_levels)
            .flat_map(|(r, &w)| r.map(move |_| w))
            .collect()
    }

    /// CSV rows `slot,level,kind` for plotting.
    pub fn to_csv(&self, transmitter: usize) -> String {
        let mut out = String::new();
        for (b, w) in self.boundaries.iter().zip(&self.water_levels) {
            let kind = match b.kind {
                BoundaryKind::Depletion => "BDP",
                BoundaryKind::Full => "BFP",
                BoundaryKind::HorizonEnd => "END",
            };
            out.push_str(&format!("{transmitter},{},{w},{kind}\n", b.slot));
        }
        out
    }
}

/// Inputs of one transmitter's energy subproblem.
#[derive(Debug, Clone, Copy)]
pub struct EnergySlice<'a> {
    pub bandwidth: &'a [f64],
    pub gains: &'a [f64],
    /// Effective cumulative budget after discharge.
    pub budget: &'a [f64],
    pub max_power: f64,
    pub battery_cap: f64,
}

impl EnergySlice<'_> {
    fn len(&self) -> usize {
        self.budget.len()
    }

    fn check(&self) -> Result<(), WaterfillError> {
        let k = self.len();
        if self.bandwidth.len() != k || self.gains.len() != k {
            return Err(WaterfillError::Shape);
        }
        Ok(())
    }

    pub fn lower(&self) -> Vec<f64> {
        self.budget.iter().map(|e| e - self.battery_cap).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpSolution {
    pub energy: Vec<f64>,
    pub profile: SegmentProfile,
}

#[inline]
fn rate_bearing(a: f64, h: f64) -> bool {
    a > 0.0 && h > 0.0
}

/// Level axis shared by all slots of one transmitter. Levels above
/// `saturation` cap every rate-bearing slot and start filling zero-rate slots,
/// which are full at `saturation + 1`.
#[derive(Debug, Clone, Copy)]
struct LevelAxis {
    saturation: f64,
    cap: f64,
}

impl LevelAxis {
    fn new(a: &[f64], h: &[f64], cap: f64) -> Self {
        let saturation = a
            .iter()
            .zip(h)
            .filter(|(&a, &h)| rate_bearing(a, h))
            .map(|(&a, &h)| 1.0 / h + cap / a)
            .fold(0.0, f64::max);
        LevelAxis { saturation, cap }
    }

    fn top(&self) -> f64 {
        if self.cap.is_finite() {
            self.saturation + 1.0
        } else {
            f64::INFINITY
        }
    }

    #[inline]
    fn fill(&self, level: f64, a: f64, h: f64) -> f64 {
        if rate_bearing(a, h) {
            self.cap.min(a * (level - 1.0 / h).max(0.0))
        } else if self.cap.is_finite() {
            self.cap * (level - self.saturation).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Piecewise-linear total fill of a run of slots as a function of level.
struct FillCurve {
    knots: Vec<(f64, f64)>,
    tail_slope: f64,
}

impl FillCurve {
    fn new(axis: &LevelAxis, a: &[f64], h: &[f64]) -> Self {
        let mut events: Vec<(f64, f64)> = Vec::with_capacity(2 * a.len());
        for (&ak, &hk) in a.iter().zip(h) {
            if rate_bearing(ak, hk) {
                let start = 1.0 / hk;
                events.push((start, ak));
                if axis.cap.is_finite() {
                    events.push((start + axis.cap / ak, -ak));
                }
            } else if axis.cap.is_finite() && axis.cap > 0.0 {
                events.push((axis.saturation, axis.cap));
                events.push((axis.saturation + 1.0, -axis.cap));
            }
        }
        events.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut knots = vec![(0.0, 0.0)];
        let (mut level, mut fill, mut slope) = (0.0f64, 0.0f64, 0.0f64);
        for (at, delta) in events {
            if at > level {
                fill += slope * (at - level);
                level = at;
                knots.push((level, fill));
            }
            slope += delta;
        }
        FillCurve {
            knots,
            tail_slope: if slope.abs() < 1e-12 { 0.0 } else { slope },
        }
    }

    fn max_fill(&self) -> f64 {
        if self.tail_slope > 0.0 {
            f64::INFINITY
        } else {
            self.knots.last().unwrap().1
        }
    }

    /// Smallest level with fill at least `target`, `None` if unreachable.
    fn lowest_level_reaching(&self, target: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        for w in self.knots.windows(2) {
            let ((l0, f0), (l1, f1)) = (w[0], w[1]);
            if f1 >= target {
                if f1 <= f0 {
                    return Some(l0);
                }
                return Some(l0 + (target - f0) / (f1 - f0) * (l1 - l0));
            }
        }
        let &(l, f) = self.knots.last().unwrap();
        if self.tail_slope > 0.0 {
            Some(l + (target - f) / self.tail_slope)
        } else {
            // A target equal to the saturated fill may exceed it by rounding.
            (target - f <= 1e-12 * (1.0 + f)).then_some(l)
        }
    }

    /// Largest level with fill at most `target` (`+inf` if never exceeded),
    /// `None` if `target < 0`.
    fn highest_level_within(&self, target: f64) -> Option<f64> {
        if target < 0.0 {
            return None;
        }
        if target >= self.max_fill() {
            return Some(f64::INFINITY);
        }
        for w in self.knots.windows(2) {
            let ((l0, f0), (l1, f1)) = (w[0], w[1]);
            if f1 > target {
                return Some(l0 + (target - f0) / (f1 - f0) * (l1 - l0));
            }
        }
        let &(l, f) = self.knots.last().unwrap();
        Some(l + (target - f) / self.tail_slope)
    }
}

/// Water level and energy split that puts exactly `target` energy into a
/// segment. Returns the smallest consistent level.
pub fn segment_water_level(
    bandwidth: &[f64],
    gains: &[f64],
    max_power: f64,
    target: f64,
) -> Result<(f64, Vec<f64>), WaterfillError> {
    if bandwidth.len() != gains.len() {
        return Err(WaterfillError::Shape);
    }
    let rate_slots = bandwidth
        .iter()
        .zip(gains)
        .filter(|(&a, &h)| rate_bearing(a, h))
        .count();
    let capacity = if rate_slots == 0 {
        0.0
    } else {
        max_power * bandwidth.len() as f64
    };
    if !(0.0..=capacity * (1.0 + 1e-12)).contains(&target) {
        return Err(WaterfillError::InfeasibleSegment { target, capacity });
    }
    let axis = LevelAxis::new(bandwidth, gains, max_power);
    let curve = FillCurve::new(&axis, bandwidth, gains);
    let level = curve
        .lowest_level_reaching(target)
        .ok_or(WaterfillError::InfeasibleSegment { target, capacity })?;
    let energy = bandwidth
        .iter()
        .zip(gains)
        .map(|(&a, &h)| axis.fill(level, a, h))
        .collect();
    Ok((reported_level(&axis, level, bandwidth, gains), energy))
}

/// Water level to report for a segment filled at `level`: the level itself,
/// or the smallest level capping every rate-bearing slot when all are capped.
fn reported_level(axis: &LevelAxis, level: f64, a: &[f64], h: &[f64]) -> f64 {
    let capping = a
        .iter()
        .zip(h)
        .filter(|(&a, &h)| rate_bearing(a, h))
        .map(|(&a, &h)| 1.0 / h + axis.cap / a)
        .fold(0.0, f64::max);
    if level >= capping {
        capping
    } else {
        level
    }
}

#[derive(Clone, Copy)]
struct Extreme {
    level: f64,
    slot: usize,
}

/// Optimal energy schedule of one transmitter for fixed bandwidth shares.
pub fn solve_ep(slice: &EnergySlice<'_>) -> Result<EpSolution, WaterfillError> {
    slice.check()?;
    let k_total = slice.len();
    let upper = slice.budget;
    let lower = slice.lower();
    band_reachable(&lower, upper, slice.max_power, 1e-9)
        .map_err(|slot| WaterfillError::EmptyBand { slot })?;

    let axis = LevelAxis::new(slice.bandwidth, slice.gains, slice.max_power);
    let mut energy = vec![0.0; k_total];
    let mut boundaries = Vec::new();
    let mut levels = Vec::new();
    let mut start = 0;
    let mut consumed = 0.0;
    let tol = |x: f64| 1e-12 * (1.0 + x.abs());

    while start < k_total {
        let mut max_lo = Extreme {
            level: f64::NEG_INFINITY,
            slot: start,
        };
        let mut min_hi = Extreme {
            level: f64::INFINITY,
            slot: start,
        };
        let mut closed: Option<(Extreme, BoundaryKind)> = None;
        for end in start..k_total {
            let curve = FillCurve::new(
                &axis,
                &slice.bandwidth[start..=end],
                &slice.gains[start..=end],
            );
            // Rounding in `consumed` must not turn an exactly spent budget negative.
            let room = upper[end] - consumed;
            let room = if room < 0.0 && room >= -tol(upper[end]) {
                0.0
            } else {
                room
            };
            let lo = curve
                .lowest_level_reaching(lower[end] - consumed)
                .unwrap_or(f64::INFINITY);
            let hi = curve
                .highest_level_within(room)
                .unwrap_or(f64::NEG_INFINITY);
            if end > start {
                if hi < max_lo.level - tol(max_lo.level) {
                    closed = Some((max_lo, BoundaryKind::Full));
                    break;
                }
                if lo > min_hi.level + tol(min_hi.level) {
                    closed = Some((min_hi, BoundaryKind::Depletion));
                    break;
                }
            } else if hi == f64::NEG_INFINITY || lo > hi + tol(hi) {
                return Err(WaterfillError::EmptyBand { slot: end });
            }
            if lo > max_lo.level {
                max_lo = Extreme {
                    level: lo,
                    slot: end,
                };
            }
            if hi < min_hi.level {
                min_hi = Extreme {
                    level: hi,
                    slot: end,
                };
            }
        }
        let (extreme, kind) = closed.unwrap_or_else(|| {
            if min_hi.level.is_finite() && min_hi.slot + 1 < k_total {
                (min_hi, BoundaryKind::Depletion)
            } else {
                let level = if min_hi.level.is_finite() {
                    min_hi.level
                } else {
                    axis.top()
                };
                (
                    Extreme {
                        level,
                        slot: k_total - 1,
                    },
                    BoundaryKind::HorizonEnd,
                )
            }
        });
        let level = extreme.level.max(0.0);
        let last = extreme.slot;
        for k in start..=last {
            energy[k] = axis.fill(level, slice.bandwidth[k], slice.gains[k]);
            consumed += energy[k];
        }
        let kind = if last + 1 == k_total {
            BoundaryKind::HorizonEnd
        } else {
            kind
        };
        boundaries.push(Boundary {
            slot: last + 1,
            kind,
        });
        levels.push(reported_level(
            &axis,
            level,
            &slice.bandwidth[start..=last],
            &slice.gains[start..=last],
        ));
        start = last + 1;
    }
    Ok(EpSolution {
        energy,
        profile: SegmentProfile {
            boundaries,
            water_levels: levels,
        },
    })
}

/// Admissible water levels for one slot given its energy, within `tol`.
pub(crate) fn slot_level_interval(p: f64, a: f64, h: f64, cap: f64, tol: f64) -> (f64, f64) {
    if !rate_bearing(a, h) {
        return if p <= tol {
            (0.0, f64::INFINITY)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
    }
    let lo = if p - tol <= 0.0 {
        0.0
    } else {
        (p - tol) / a + 1.0 / h
    };
    let hi = if p + tol >= cap {
        f64::INFINITY
    } else {
        (p + tol) / a + 1.0 / h
    };
    (lo, hi)
}

/// Checks the optimality structure of an energy schedule: the filling rule
/// against the reported levels, level changes only at empty/full battery
/// points, and per-segment energy totals matching the boundary kinds.
pub fn verify_water_levels(
    energy: &[f64],
    profile: &SegmentProfile,
    slice: &EnergySlice<'_>,
) -> bool {
    verify_water_levels_tol(energy, profile, slice, 1e-7)
}

pub fn verify_water_levels_tol(
    energy: &[f64],
    profile: &SegmentProfile,
    slice: &EnergySlice<'_>,
    tol: f64,
) -> bool {
    let k_total = slice.len();
    if slice.check().is_err() || energy.len() != k_total {
        return false;
    }
    if profile.boundaries.len() != profile.water_levels.len()
        || profile.boundaries.last().map(|b| b.slot) != Some(k_total)
        || profile
            .boundaries
            .windows(2)
            .any(|w| w[0].slot >= w[1].slot)
        || profile.boundaries.first().is_some_and(|b| b.slot == 0)
    {
        return false;
    }
    let cap = slice.max_power;
    let bmax = slice.battery_cap;
    // Feasibility and battery trajectory.
    let mut battery = Vec::with_capacity(k_total);
    let mut cum = 0.0;
    for k in 0..k_total {
        let p = energy[k];
        if p < -tol || p > cap + tol {
            return false;
        }
        cum += p;
        let b = slice.budget[k] - cum;
        if b < -tol || b > bmax + tol {
            return false;
        }
        battery.push(b);
    }
    let empty = |k: usize| battery[k] <= tol;
    let full = |k: usize| battery[k] >= bmax - tol;

    let segments = profile.segments();
    let mut intervals = Vec::with_capacity(segments.len());
    for (seg, &w) in segments.iter().zip(&profile.water_levels) {
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for k in seg.clone() {
            let (l, h) =
                slot_level_interval(energy[k], slice.bandwidth[k], slice.gains[k], cap, tol);
            lo = lo.max(l);
            hi = hi.min(h);
        }
        let slack = tol * (1.0 + w.abs());
        if lo.is_infinite() {
            // Zero-rate slots carry energy: every rate-bearing slot must be capped.
            let all_capped = seg.clone().all(|k| {
                !rate_bearing(slice.bandwidth[k], slice.gains[k]) || energy[k] >= cap - tol
            });
            if !all_capped {
                return false;
            }
        } else if w < lo - slack || w > hi + slack {
            return false;
        }
        intervals.push((lo, hi));
    }
    // Level changes only at battery boundary points.
    for (i, b) in profile
        .boundaries
        .iter()
        .enumerate()
        .take(segments.len() - 1)
    {
        let slot = b.slot - 1;
        let (lo0, hi0) = intervals[i];
        let (lo1, hi1) = intervals[i + 1];
        if hi0 < lo1 - tol * (1.0 + lo1.abs()) && !empty(slot) {
            return false;
        }
        if lo0 > hi1 + tol * (1.0 + lo0.abs()) && !full(slot) {
            return false;
        }
    }
    // Per-segment totals with boundary indicators.
    let mut prev_full = false;
    let mut prev_budget = 0.0;
    for (seg, b) in segments.iter().zip(&profile.boundaries) {
        let last = b.slot - 1;
        let ends_full = b.kind == BoundaryKind::Full;
        match b.kind {
            BoundaryKind::Full if !full(last) => return false,
            BoundaryKind::Depletion if !empty(last) => return false,
            _ => {}
        }
        let indicator = f64::from(u8::from(prev_full)) - f64::from(u8::from(ends_full));
        let target =
            (seg.len() as f64 * cap).min(slice.budget[last] - prev_budget + indicator * bmax);
        let total: f64 = energy[seg.clone()].iter().sum();
        if (total - target).abs() > tol * (1.0 + target.abs()) * seg.len() as f64 {
            return false;
        }
        prev_full = ends_full;
        prev_budget = slice.budget[last];
    }
    true
}
