//! Problem data, decision variables, the sum-rate objective and feasibility
//! predicates shared by every solver.
//!
//! Conventions: rates are in nats, the total band is normalized to 1, slots
//! are 0-based internally (1-based only in user-facing boundary output), and
//! every battery starts empty.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::FEAS_TOL;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid input in field `{field}`: {reason}")]
    InvalidInput { field: &'static str, reason: String },
    #[error(
        "battery of transmitter {transmitter} leaves [0, B_max] at slot {slot} (level {level})"
    )]
    BatteryOutOfRange {
        transmitter: usize,
        slot: usize,
        level: f64,
    },
}

impl ModelError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ModelError::InvalidInput {
            field,
            reason: reason.into(),
        }
    }

    /// Field the error refers to, if any.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ModelError::InvalidInput { field, .. } => Some(field),
            ModelError::BatteryOutOfRange { .. } => None,
        }
    }
}

/// Static problem data.
///
/// `gains` is indexed `[link][slot]`, `harvest` holds the cumulative harvest
/// `[transmitter][slot]`. Links are identified with receivers; `receiver_map[n]`
/// lists the receivers served by transmitter `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance {
    #[serde(rename = "N")]
    pub num_transmitters: usize,
    #[serde(rename = "M")]
    pub num_receivers: usize,
    #[serde(rename = "K")]
    pub horizon: usize,
    pub receiver_map: Vec<Vec<usize>>,
    #[serde(rename = "H")]
    pub gains: Vec<Vec<f64>>,
    #[serde(rename = "E_cumulative")]
    pub harvest: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub max_power: Vec<f64>,
    #[serde(rename = "B_max")]
    pub battery_cap: Vec<f64>,
    #[serde(rename = "W")]
    pub weights: Vec<f64>,
    #[serde(skip)]
    owner: Vec<usize>,
}

#[derive(Deserialize)]
struct RawInstance {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "K")]
    k: usize,
    receiver_map: Vec<Vec<usize>>,
    #[serde(rename = "H")]
    gains: Vec<Vec<f64>>,
    #[serde(rename = "E_cumulative")]
    harvest: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    max_power: Vec<f64>,
    #[serde(rename = "B_max")]
    battery_cap: Vec<f64>,
    #[serde(rename = "W")]
    weights: Vec<f64>,
}

impl<'de> Deserialize<'de> for Instance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawInstance::deserialize(d)?;
        Instance::new(
            raw.n,
            raw.m,
            raw.k,
            raw.receiver_map,
            raw.gains,
            raw.harvest,
            raw.max_power,
            raw.battery_cap,
            raw.weights,
        )
        .map_err(serde::de::Error::custom)
    }
}

fn check_matrix(
    field: &'static str,
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
) -> Result<(), ModelError> {
    if rows.len() != nrows {
        return Err(ModelError::invalid(
            field,
            format!("expected {nrows} rows, found {}", rows.len()),
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(ModelError::invalid(
                field,
                format!("row {i} has {} entries, expected {ncols}", row.len()),
            ));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ModelError::invalid(
                field,
                format!("row {i} contains {v}; entries must be finite and nonnegative"),
            ));
        }
    }
    Ok(())
}

fn check_vector(field: &'static str, v: &[f64], len: usize) -> Result<(), ModelError> {
    if v.len() != len {
        return Err(ModelError::invalid(
            field,
            format!("expected {len} entries, found {}", v.len()),
        ));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(ModelError::invalid(
            field,
            format!("entry {x} must be finite and nonnegative"),
        ));
    }
    Ok(())
}

impl Instance {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_transmitters: usize,
        num_receivers: usize,
        horizon: usize,
        receiver_map: Vec<Vec<usize>>,
        gains: Vec<Vec<f64>>,
        harvest: Vec<Vec<f64>>,
        max_power: Vec<f64>,
        battery_cap: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if horizon == 0 {
            return Err(ModelError::invalid("K", "horizon must be at least 1"));
        }
        if num_transmitters == 0 {
            return Err(ModelError::invalid("N", "need at least one transmitter"));
        }
        if num_transmitters > num_receivers {
            return Err(ModelError::invalid("M", "need N <= M"));
        }
        if receiver_map.len() != num_transmitters {
            return Err(ModelError::invalid(
                "receiver_map",
                format!(
                    "expected {num_transmitters} sets, found {}",
                    receiver_map.len()
                ),
            ));
        }
        let mut owner = vec![usize::MAX; num_receivers];
        for (n, set) in receiver_map.iter().enumerate() {
            if set.is_empty() {
                return Err(ModelError::invalid(
                    "receiver_map",
                    format!("transmitter {n} serves no receiver"),
                ));
            }
            for &m in set {
                if m >= num_receivers {
                    return Err(ModelError::invalid(
                        "receiver_map",
                        format!("receiver id {m} out of range 0..{num_receivers}"),
                    ));
                }
                if owner[m] != usize::MAX {
                    return Err(ModelError::invalid(
                        "receiver_map",
                        format!("receiver {m} assigned to more than one transmitter"),
                    ));
                }
                owner[m] = n;
            }
        }
        if let Some(m) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(ModelError::invalid(
                "receiver_map",
                format!("receiver {m} is not served by any transmitter"),
            ));
        }
        check_matrix("H", &gains, num_receivers, horizon)?;
        check_matrix("E_cumulative", &harvest, num_transmitters, horizon)?;
        for (n, row) in harvest.iter().enumerate() {
            if row.windows(2).any(|w| w[1] < w[0]) {
                return Err(ModelError::invalid(
                    "E_cumulative",
                    format!("row {n} must be nondecreasing"),
                ));
            }
        }
        check_vector("P", &max_power, num_transmitters)?;
        check_vector("B_max", &battery_cap, num_transmitters)?;
        check_vector("W", &weights, num_receivers)?;
        Ok(Instance {
            num_transmitters,
            num_receivers,
            horizon,
            receiver_map,
            gains,
            harvest,
            max_power,
            battery_cap,
            weights,
            owner,
        })
    }

    /// Point-to-point instance with unit weights: transmitter `n` serves link `n`.
    pub fn point_to_point(
        gains: Vec<Vec<f64>>,
        harvest: Vec<Vec<f64>>,
        max_power: Vec<f64>,
        battery_cap: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = harvest.len();
        let k = harvest.first().map_or(0, Vec::len);
        Instance::new(
            n,
            n,
            k,
            (0..n).map(|i| vec![i]).collect(),
            gains,
            harvest,
            max_power,
            battery_cap,
            vec![1.0; n],
        )
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| ModelError::invalid("instance", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ModelError> {
        let field = |name: &'static str| -> Result<serde_json::Value, ModelError> {
            value
                .get(name)
                .cloned()
                .ok_or_else(|| ModelError::invalid(name, "missing field"))
        };
        fn parse<T: serde::de::DeserializeOwned>(
            name: &'static str,
            v: serde_json::Value,
        ) -> Result<T, ModelError> {
            serde_json::from_value(v).map_err(|e| ModelError::invalid(name, e.to_string()))
        }
        Instance::new(
            parse("N", field("N")?)?,
            parse("M", field("M")?)?,
            parse("K", field("K")?)?,
            parse("receiver_map", field("receiver_map")?)?,
            parse("H", field("H")?)?,
            parse("E_cumulative", field("E_cumulative")?)?,
            parse("P", field("P")?)?,
            parse("B_max", field("B_max")?)?,
            parse("W", field("W")?)?,
        )
    }

    /// Transmitter that owns link `m`.
    pub fn owner(&self, m: usize) -> usize {
        self.owner[m]
    }

    /// Per-slot harvest increments of transmitter `n`.
    pub fn increments(&self, n: usize) -> Vec<f64> {
        increments(&self.harvest[n])
    }

    /// True when every transmitter serves exactly one receiver and all weights are 1.
    pub fn is_point_to_point(&self) -> bool {
        self.receiver_map.iter().all(|s| s.len() == 1) && self.weights.iter().all(|&w| w == 1.0)
    }

    /// Link served by transmitter `n` in the point-to-point case.
    pub fn link_of(&self, n: usize) -> usize {
        self.receiver_map[n][0]
    }
}

pub(crate) fn increments(cumulative: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    cumulative
        .iter()
        .map(|&e| {
            let d = e - prev;
            prev = e;
            d
        })
        .collect()
}

/// Energy `p[link][slot]` and bandwidth share `a[link][slot]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub p: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
}

impl Allocation {
    pub fn zeros(links: usize, horizon: usize) -> Self {
        Allocation {
            p: vec![vec![0.0; horizon]; links],
            a: vec![vec![0.0; horizon]; links],
        }
    }

    /// Zero energy, uniform bandwidth.
    pub fn uniform(links: usize, horizon: usize) -> Self {
        Allocation {
            p: vec![vec![0.0; horizon]; links],
            a: vec![vec![1.0 / links as f64; horizon]; links],
        }
    }

    fn check_shape(&self, inst: &Instance) -> Result<(), ModelError> {
        for (name, mat) in [("p", &self.p), ("a", &self.a)] {
            if mat.len() != inst.num_receivers || mat.iter().any(|r| r.len() != inst.horizon) {
                return Err(ModelError::invalid(
                    name,
                    format!(
                        "allocation must be {} x {}",
                        inst.num_receivers, inst.horizon
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Total energy drawn by transmitter `n` in each slot.
    pub fn transmitter_energy(&self, inst: &Instance, n: usize) -> Vec<f64> {
        (0..inst.horizon)
            .map(|k| inst.receiver_map[n].iter().map(|&m| self.p[m][k]).sum())
            .collect()
    }
}

/// Discharge decisions `D[n][k]` and the resulting effective cumulative budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DischargePlan {
    #[serde(rename = "D")]
    pub discharge: Vec<Vec<f64>>,
    #[serde(rename = "E_effective")]
    pub effective: Vec<Vec<f64>>,
}

impl DischargePlan {
    /// Builds the plan from discharges, deriving the effective budget.
    pub fn from_discharge(inst: &Instance, discharge: Vec<Vec<f64>>) -> Self {
        let effective = discharge
            .iter()
            .zip(&inst.harvest)
            .map(|(d, e)| {
                let mut acc = 0.0;
                d.iter()
                    .zip(e)
                    .map(|(&dk, &ek)| {
                        acc += dk;
                        ek - acc
                    })
                    .collect()
            })
            .collect();
        DischargePlan {
            discharge,
            effective,
        }
    }

    /// Lower and upper bounds on cumulative consumption of transmitter `n`.
    pub fn band(&self, inst: &Instance, n: usize) -> (Vec<f64>, Vec<f64>) {
        let cap = inst.battery_cap[n];
        let upper = self.effective[n].clone();
        let lower = upper.iter().map(|&e| e - cap).collect();
        (lower, upper)
    }
}

/// Rate of one link in one slot, `a ln(1 + pH/a)` with the `0 ln(1 + x/0) = 0` convention.
#[inline]
pub fn link_rate(a: f64, p: f64, h: f64) -> f64 {
    if a <= 0.0 {
        0.0
    } else {
        a * (p * h / a).ln_1p()
    }
}

/// Weighted sum rate in nats.
pub fn objective(inst: &Instance, alloc: &Allocation) -> Result<f64, ModelError> {
    alloc.check_shape(inst)?;
    let mut total = 0.0;
    for m in 0..inst.num_receivers {
        let row: f64 = (0..inst.horizon)
            .map(|k| link_rate(alloc.a[m][k], alloc.p[m][k], inst.gains[m][k]))
            .sum();
        total += inst.weights[m] * row;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Shape,
    /// Cumulative consumption above the effective budget (battery below 0).
    EnergyCausality,
    /// Cumulative consumption below budget minus capacity (battery above B_max).
    BatteryOverflow,
    PowerCap,
    NegativeEnergy,
    BandwidthSum,
    BandwidthFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Transmitter or link index, depending on the constraint.
    pub index: Option<usize>,
    pub slot: Option<usize>,
    pub magnitude: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(i) = self.index {
            write!(f, " index {i}")?;
        }
        if let Some(k) = self.slot {
            write!(f, " slot {k}")?;
        }
        write!(f, " by {:.3e}", self.magnitude)
    }
}

/// Lists every constraint of the ε-restricted second-stage problem violated
/// by more than `tol`.
pub fn check_feasible_tol(
    inst: &Instance,
    plan: &DischargePlan,
    alloc: &Allocation,
    eps: f64,
    tol: f64,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if alloc.check_shape(inst).is_err()
        || plan.effective.len() != inst.num_transmitters
        || plan.effective.iter().any(|r| r.len() != inst.horizon)
    {
        out.push(Violation {
            kind: ViolationKind::Shape,
            index: None,
            slot: None,
            magnitude: f64::INFINITY,
        });
        return out;
    }
    for n in 0..inst.num_transmitters {
        let (lower, upper) = plan.band(inst, n);
        let per_slot = alloc.transmitter_energy(inst, n);
        let mut cum = 0.0;
        for k in 0..inst.horizon {
            cum += per_slot[k];
            if cum > upper[k] + tol {
                out.push(Violation {
                    kind: ViolationKind::EnergyCausality,
                    index: Some(n),
                    slot: Some(k),
                    magnitude: cum - upper[k],
                });
            }
            if cum < lower[k] - tol {
                out.push(Violation {
                    kind: ViolationKind::BatteryOverflow,
                    index: Some(n),
                    slot: Some(k),
                    magnitude: lower[k] - cum,
                });
            }
            if per_slot[k] > inst.max_power[n] + tol {
                out.push(Violation {
                    kind: ViolationKind::PowerCap,
                    index: Some(n),
                    slot: Some(k),
                    magnitude: per_slot[k] - inst.max_power[n],
                });
            }
        }
    }
    for k in 0..inst.horizon {
        let mut sum = 0.0;
        for m in 0..inst.num_receivers {
            let (p, a) = (alloc.p[m][k], alloc.a[m][k]);
            if p < -tol {
                out.push(Violation {
                    kind: ViolationKind::NegativeEnergy,
                    index: Some(m),
                    slot: Some(k),
                    magnitude: -p,
                });
            }
            if a < eps - tol {
                out.push(Violation {
                    kind: ViolationKind::BandwidthFloor,
                    index: Some(m),
                    slot: Some(k),
                    magnitude: eps - a,
                });
            }
            sum += a;
        }
        if (sum - 1.0).abs() > tol {
            out.push(Violation {
                kind: ViolationKind::BandwidthSum,
                index: None,
                slot: Some(k),
                magnitude: (sum - 1.0).abs(),
            });
        }
    }
    out
}

/// [`check_feasible_tol`] at the default tolerance.
pub fn check_feasible(
    inst: &Instance,
    plan: &DischargePlan,
    alloc: &Allocation,
    eps: f64,
) -> Vec<Violation> {
    check_feasible_tol(inst, plan, alloc, eps, FEAS_TOL)
}

/// End-of-slot battery levels of transmitter `n`, starting from an empty battery.
pub fn battery_trajectory(
    inst: &Instance,
    plan: &DischargePlan,
    alloc: &Allocation,
    n: usize,
) -> Result<Vec<f64>, ModelError> {
    let consumption = alloc.transmitter_energy(inst, n);
    let deltas = inst.increments(n);
    let cap = inst.battery_cap[n];
    let mut level = 0.0;
    let mut out = Vec::with_capacity(inst.horizon);
    for k in 0..inst.horizon {
        level += deltas[k] - consumption[k] - plan.discharge[n][k];
        if level < -FEAS_TOL || level > cap + FEAS_TOL {
            return Err(ModelError::BatteryOutOfRange {
                transmitter: n,
                slot: k,
                level,
            });
        }
        out.push(level);
    }
    Ok(out)
}

/// Whether a consumption path with per-slot draws in `[0, cap]` can stay
/// inside `[lower[k], upper[k]]` for every slot. Returns the first slot where
/// the reachable set becomes empty.
pub fn band_reachable(lower: &[f64], upper: &[f64], cap: f64, tol: f64) -> Result<(), usize> {
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for k in 0..upper.len() {
        let next_lo = lo.max(lower[k]);
        let next_hi = (hi + cap).min(upper[k]);
        if next_lo > next_hi + tol {
            return Err(k);
        }
        lo = next_lo;
        hi = next_hi.max(next_lo);
    }
    Ok(())
}
