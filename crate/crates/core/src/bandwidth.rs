//! Per-slot bandwidth split by iterative fitting.
//!
//! For fixed energies, each slot maximizes `sum_n a_n ln(1 + pH_n / a_n)` over
//! the simplex with floor `a_n >= eps`. Links that are active share the
//! residual bandwidth in proportion to `pH`; links whose proportional share
//! would drop to the floor are pinned there, and the split is recomputed
//! until no active link violates the floor.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandwidthError {
    #[error("all links carry zero received power")]
    Degenerate,
    #[error("floor {eps} leaves an empty simplex for {links} links")]
    FloorTooLarge { eps: f64, links: usize },
    #[error("received power must be finite and nonnegative")]
    InvalidPower,
}

/// Active and floored link sets after one fitting pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FittingState {
    pub active: Vec<usize>,
    pub floored: Vec<usize>,
    pub a: Vec<f64>,
    /// `(1 - |floored| eps) / sum_{active} pH`
    pub ratio: f64,
}

fn check(ph: &[f64], eps: f64) -> Result<(), BandwidthError> {
    if ph.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(BandwidthError::InvalidPower);
    }
    if !(eps >= 0.0) || ph.len() as f64 * eps > 1.0 {
        return Err(BandwidthError::FloorTooLarge {
            eps,
            links: ph.len(),
        });
    }
    if ph.iter().all(|&x| x == 0.0) {
        return Err(BandwidthError::Degenerate);
    }
    Ok(())
}

/// Runs the fitting iteration and records the state after every pass.
pub fn fit_bandwidth_traced(ph: &[f64], eps: f64) -> Result<Vec<FittingState>, BandwidthError> {
    check(ph, eps)?;
    let mut in_active: Vec<bool> = ph.iter().map(|&x| x > 0.0).collect();
    let mut states = Vec::new();
    loop {
        let floored = in_active.iter().filter(|&&t| !t).count();
        let total: f64 = ph
            .iter()
            .zip(&in_active)
            .filter(|(_, &t)| t)
            .map(|(x, _)| x)
            .sum();
        let ratio = (1.0 - floored as f64 * eps) / total;
        let mut a: Vec<f64> = ph
            .iter()
            .zip(&in_active)
            .map(|(&x, &t)| if t { ratio * x } else { eps })
            .collect();
        // Pin the sum to one exactly: put the rounding residue on the largest active share.
        if let Some(top) = (0..a.len())
            .filter(|&n| in_active[n])
            .max_by(|&i, &j| a[i].total_cmp(&a[j]))
        {
            let residue = 1.0 - a.iter().sum::<f64>();
            a[top] += residue;
        }
        let violations: Vec<usize> = (0..a.len())
            .filter(|&n| in_active[n] && a[n] <= eps)
            .collect();
        states.push(FittingState {
            active: (0..a.len()).filter(|&n| in_active[n]).collect(),
            floored: (0..a.len()).filter(|&n| !in_active[n]).collect(),
            a,
            ratio,
        });
        if violations.is_empty() {
            return Ok(states);
        }
        for n in violations {
            in_active[n] = false;
        }
    }
}

/// Optimal bandwidth split of one slot with per-link floor `eps`.
pub fn fit_bandwidth(ph: &[f64], eps: f64) -> Result<Vec<f64>, BandwidthError> {
    Ok(fit_bandwidth_traced(ph, eps)?
        .pop()
        .expect("at least one pass")
        .a)
}

/// Default tolerance of [`verify_split_optimality`].
pub const FIT_TOL: f64 = 1e-9;

/// Checks the optimality structure of a bandwidth split: proportional shares
/// on links above the floor, and every floored link receiving no more power
/// per unit bandwidth than the active links would grant it.
pub fn verify_split_optimality(ph: &[f64], eps: f64, a: &[f64]) -> bool {
    verify_split_optimality_tol(ph, eps, a, FIT_TOL)
}

pub fn verify_split_optimality_tol(ph: &[f64], eps: f64, a: &[f64], tol: f64) -> bool {
    if a.len() != ph.len()
        || (a.iter().sum::<f64>() - 1.0).abs() > tol
        || a.iter().any(|&x| x < eps - tol)
    {
        return false;
    }
    let active: Vec<usize> = (0..a.len()).filter(|&n| a[n] > eps + tol).collect();
    let floored = a.len() - active.len();
    let total: f64 = active.iter().map(|&n| ph[n]).sum();
    if active.is_empty() {
        // Everything on the floor: only consistent when the floor fills the simplex.
        return (a.len() as f64 * eps - 1.0).abs() <= tol;
    }
    if total <= 0.0 {
        return false;
    }
    let ratio = (1.0 - floored as f64 * eps) / total;
    let proportional = active
        .iter()
        .all(|&n| (a[n] - ratio * ph[n]).abs() <= tol * (1.0 + a[n]));
    let dominated = (0..a.len())
        .filter(|&n| a[n] <= eps + tol)
        .all(|n| eps >= ratio * ph[n] - tol);
    proportional && dominated
}
