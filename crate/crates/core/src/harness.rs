//! Seeded instance generation and Monte Carlo campaigns over all policies.
//!
//! Every random draw comes from its own ChaCha8 stream keyed by
//! `(seed, trial, transmitter, slot, quantity)`, so a trial sees the same
//! channel and the same underlying noise at every sweep point and power cap.
//! Paired comparisons across policies and configurations are therefore exact.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{objective, Instance};
use crate::policies::{
    causal_policy, equal_bandwidth_policy, greedy_policy, init_causal, init_causal_fixed,
    tdma_greedy_policy, truncated_inverse_gain_mean, CausalState, Policy,
};
use crate::scheduler::{solve, SolveError, SolveOptions};
use crate::verify::kkt::{kkt_residual_tol, KktReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error("trial {trial} at mu_E = {mu_e}: {source}")]
    Solve {
        trial: usize,
        mu_e: f64,
        source: SolveError,
    },
    #[error("trial {trial} at mu_E = {mu_e} failed certification (max residual {residual:.3e})")]
    Certification {
        trial: usize,
        mu_e: f64,
        residual: f64,
        /// The offending instance, for reproduction.
        instance: Box<Instance>,
        report: Option<Box<KktReport>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelModel {
    /// Unit-power Rayleigh fading: exponential power gains with mean 1.
    #[default]
    Rayleigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CausalInit {
    Fixed {
        water_level: f64,
        factor: f64,
    },
    /// Level from the realized harvest and truncated inverse-gain means.
    Formula {
        h_min: f64,
    },
}

impl Default for CausalInit {
    fn default() -> Self {
        CausalInit::Fixed {
            water_level: 25.0,
            factor: 1.1,
        }
    }
}

fn default_policies() -> Vec<Policy> {
    Policy::ALL.to_vec()
}

fn default_delta() -> f64 {
    1e-3
}

fn default_kkt_tolerance() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    #[serde(rename = "N")]
    pub transmitters: usize,
    #[serde(rename = "K")]
    pub horizon: usize,
    #[serde(rename = "B_max")]
    pub battery_cap: f64,
    #[serde(rename = "P")]
    pub max_power: f64,
    /// Sweep of mean harvest per slot.
    pub mu_e: Vec<f64>,
    /// Harvest variance per slot.
    pub variance: f64,
    #[serde(default)]
    pub channel: ChannelModel,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub causal_init: CausalInit,
    /// Bandwidth floor schedule start; defaults to `1 / (2N)`.
    #[serde(default)]
    pub eps0: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Largest accepted KKT residual of the optimal schedule.
    #[serde(default = "default_kkt_tolerance")]
    pub kkt_tolerance: f64,
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.transmitters == 0 || self.horizon == 0 {
            return bad("N and K must be positive");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.mu_e.is_empty() || self.mu_e.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return bad("mu_e must be a nonempty list of finite nonnegative values");
        }
        if !self.variance.is_finite() || self.variance < 0.0 {
            return bad("variance must be finite and nonnegative");
        }
        if !(self.battery_cap >= 0.0) || !(self.max_power >= 0.0) {
            return bad("B_max and P must be nonnegative");
        }
        if self.policies.is_empty() {
            return bad("policies must not be empty");
        }
        Ok(())
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            eps0: self.eps0,
            delta: self.delta,
            ..SolveOptions::default()
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one random quantity of one trial.
fn stream(seed: u64, trial: usize, transmitter: usize, slot: usize, quantity: u64) -> ChaCha8Rng {
    let mut key = splitmix(seed);
    for part in [trial as u64, transmitter as u64, slot as u64, quantity] {
        key = splitmix(key ^ part);
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// Gaussian draw conditioned on `[0, inf)` by rejection.
fn truncated_gaussian(rng: &mut impl Rng, mean: f64, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let x = mean + std * z;
        if x >= 0.0 {
            return x;
        }
    }
}

const HARVEST: u64 = 0;
const GAIN: u64 = 1;

/// Instance of one trial at mean harvest `mu_e`.
pub fn generate_instance(cfg: &CampaignConfig, mu_e: f64, trial: usize) -> Instance {
    let (n_tx, horizon) = (cfg.transmitters, cfg.horizon);
    let std = cfg.variance.sqrt();
    let mut gains = vec![vec![0.0; horizon]; n_tx];
    let mut harvest = vec![vec![0.0; horizon]; n_tx];
    for n in 0..n_tx {
        let mut acc = 0.0;
        for k in 0..horizon {
            acc += truncated_gaussian(&mut stream(cfg.seed, trial, n, k, HARVEST), mu_e, std);
            harvest[n][k] = acc;
            gains[n][k] = match cfg.channel {
                ChannelModel::Rayleigh => Exp1.sample(&mut stream(cfg.seed, trial, n, k, GAIN)),
            };
        }
    }
    Instance::point_to_point(
        gains,
        harvest,
        vec![cfg.max_power; n_tx],
        vec![cfg.battery_cap; n_tx],
    )
    .expect("generated data are valid")
}

/// Initial causal state for an instance.
pub fn causal_state(init: &CausalInit, inst: &Instance) -> CausalState {
    match *init {
        CausalInit::Fixed {
            water_level,
            factor,
        } => init_causal_fixed(inst.num_transmitters, water_level, factor),
        CausalInit::Formula { h_min } => {
            let total: f64 = inst.harvest.iter().map(|e| e[inst.horizon - 1]).sum();
            let mean_harvest = total / (inst.num_transmitters * inst.horizon) as f64;
            let inv = truncated_inverse_gain_mean(inst.gains.iter().flatten().copied(), h_min);
            init_causal(inst.num_transmitters, mean_harvest, inv, &inst.max_power)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub mu_e: f64,
    /// Objective of every policy, in nats over the horizon.
    pub objectives: BTreeMap<Policy, f64>,
    pub iterations: Option<usize>,
    pub kkt_residual: Option<f64>,
    /// Realized mean harvest per slot.
    pub realized_mu_e: f64,
    pub causal_fallback_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mu_e: f64,
    pub policy: Policy,
    pub mean_rate: f64,
    pub stderr: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub trials: Vec<TrialReport>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every policy of the config on one trial.
pub fn run_trial(
    cfg: &CampaignConfig,
    mu_e: f64,
    trial: usize,
) -> Result<TrialReport, HarnessError> {
    let inst = generate_instance(cfg, mu_e, trial);
    let wrap = |source| HarnessError::Solve {
        trial,
        mu_e,
        source,
    };
    let mut report = TrialReport {
        trial,
        mu_e,
        objectives: BTreeMap::new(),
        iterations: None,
        kkt_residual: None,
        realized_mu_e: inst
            .harvest
            .iter()
            .map(|e| e[inst.horizon - 1])
            .sum::<f64>()
            / (inst.num_transmitters * inst.horizon) as f64,
        causal_fallback_slots: 0,
    };
    for &policy in &cfg.policies {
        let alloc = match policy {
            Policy::Optimal => {
                let sol = solve(&inst, &cfg.solve_options()).map_err(wrap)?;
                let cert = kkt_residual_tol(
                    &inst,
                    &sol.discharge,
                    &sol.allocation,
                    sol.trace.final_eps,
                    cfg.kkt_tolerance,
                );
                match cert {
                    Ok(r) if r.certified => report.kkt_residual = Some(r.max_residual),
                    Ok(r) => {
                        return Err(HarnessError::Certification {
                            trial,
                            mu_e,
                            residual: r.max_residual,
                            instance: Box::new(inst),
                            report: Some(Box::new(r)),
                        })
                    }
                    Err(_) => {
                        return Err(HarnessError::Certification {
                            trial,
                            mu_e,
                            residual: f64::INFINITY,
                            instance: Box::new(inst),
                            report: None,
                        })
                    }
                }
                report.iterations = Some(sol.trace.iterations());
                sol.allocation
            }
            Policy::Causal => {
                let run =
                    causal_policy(&inst, causal_state(&cfg.causal_init, &inst)).map_err(wrap)?;
                report.causal_fallback_slots = run.fallback_slots.len();
                run.allocation
            }
            Policy::Greedy => greedy_policy(&inst).map_err(wrap)?,
            Policy::Tdma => tdma_greedy_policy(&inst).map_err(wrap)?,
            Policy::Equal => equal_bandwidth_policy(&inst).map_err(wrap)?,
        };
        let value = objective(&inst, &alloc).expect("policy output has instance shape");
        report.objectives.insert(policy, value);
    }
    Ok(report)
}

/// Runs all trials at every sweep point. Trials run on the rayon pool;
/// results come back in sweep-then-trial order regardless of scheduling.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult, HarnessError> {
    cfg.validate()?;
    let jobs: Vec<(f64, usize)> = cfg
        .mu_e
        .iter()
        .flat_map(|&mu| (0..cfg.trials).map(move |t| (mu, t)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(mu, t)| run_trial(cfg, mu, t))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(cfg, &trials);
    Ok(CampaignResult { trials, summary })
}

fn summarize(cfg: &CampaignConfig, trials: &[TrialReport]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &mu in &cfg.mu_e {
        for &policy in &cfg.policies {
            let values: Vec<f64> = trials
                .iter()
                .filter(|t| t.mu_e == mu)
                .filter_map(|t| t.objectives.get(&policy).copied())
                .collect();
            let (mean_rate, stderr) = mean_stderr(&values);
            rows.push(SummaryRow {
                mu_e: mu,
                policy,
                mean_rate,
                stderr,
                trials: values.len(),
            });
        }
    }
    rows
}

/// Summary as CSV with header `mu_E,policy,mean_rate,stderr,trials`.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("mu_E,policy,mean_rate,stderr,trials\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mu_e, r.policy, r.mean_rate, r.stderr, r.trials
        ));
    }
    out
}

/// One JSON object per trial.
pub fn trials_jsonl(trials: &[TrialReport]) -> String {
    trials
        .iter()
        .map(|t| serde_json::to_string(t).expect("trial report serializes") + "\n")
        .collect()
}
