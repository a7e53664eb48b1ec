//! Acceptance checks. Each criterion prints one PASS/FAIL line with the
//! measured numbers; the binary exits nonzero if any criterion fails.

use std::time::Instant;

use ehsched::bandwidth::{fit_bandwidth, fit_bandwidth_traced};
use ehsched::discharge::{greedy_discharge, min_discharge_on_grid};
use ehsched::harness::{run_campaign, CampaignConfig, CausalInit, ChannelModel, TrialReport};
use ehsched::model::{check_feasible_tol, link_rate, objective, Allocation, Instance};
use ehsched::policies::Policy;
use ehsched::scheduler::{solve, Solution, SolveOptions};
use ehsched::verify::kkt::kkt_residual_tol;
use ehsched::verify::oracle::{best_split_zoomed, grid_oracle};
use ehsched::verify::reference::{reference_solve, ReferenceOptions};
use ehsched::waterfill::{solve_ep, verify_water_levels, EnergySlice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn exp_gain(rng: &mut ChaCha8Rng) -> f64 {
    let g: f64 = Exp1.sample(rng);
    g.max(1e-3)
}

fn cumulative(increments: &[f64]) -> Vec<f64> {
    increments
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect()
}

fn section6_config(max_power: f64, trials: usize, mu_e: Vec<f64>) -> CampaignConfig {
    CampaignConfig {
        transmitters: 4,
        horizon: 40,
        battery_cap: 20.0,
        max_power,
        mu_e,
        variance: 2.0,
        channel: ChannelModel::Rayleigh,
        trials,
        seed: 2024,
        policies: Policy::ALL.to_vec(),
        causal_init: CausalInit::default(),
        eps0: None,
        delta: 1e-3,
        kkt_tolerance: 1e-4,
    }
}

const SWEEP: [f64; 6] = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0];

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 0.01;
    let mut worst_oracle = f64::NEG_INFINITY;
    let mut worst_rel = 0.0f64;
    let mut failures = 0;
    for case in 0..100 {
        let n = 2 + case % 2;
        let k = 2 + (case / 2) % 2;
        let gains: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(0.2..3.0)).collect())
            .collect();
        // Small energies on the 0.02 grid keep the search exhaustive and
        // the greedy consumption path on the grid.
        let step =
            |rng: &mut ChaCha8Rng, lo: u32, hi: u32| f64::from(rng.random_range(lo..=hi)) * 0.02;
        let harvest: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let inc: Vec<f64> = (0..k).map(|_| step(&mut rng, 0, 4)).collect();
                cumulative(&inc)
            })
            .collect();
        let inst = Instance::point_to_point(
            gains,
            harvest,
            (0..n).map(|_| step(&mut rng, 2, 6)).collect(),
            (0..n).map(|_| step(&mut rng, 0, 5)).collect(),
        )
        .expect("valid instance");
        let sol = solve(
            &inst,
            &SolveOptions {
                eps0: Some(eps),
                ..SolveOptions::default()
            },
        )
        .expect("solve");
        let value = sol.trace.final_value();
        let grid = grid_oracle(&inst, eps, 0.02).expect("grid oracle");
        let reference = reference_solve(&inst, sol.trace.final_eps, &ReferenceOptions::default())
            .expect("reference");
        let oracle_margin = value - (grid.objective - grid.gap);
        let rel = (value - reference.objective).abs() / reference.objective.abs().max(1e-12);
        worst_oracle = if worst_oracle == f64::NEG_INFINITY {
            oracle_margin
        } else {
            worst_oracle.min(oracle_margin)
        };
        worst_rel = worst_rel.max(rel);
        if oracle_margin < 0.0 || rel > 1e-3 {
            failures += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        "oracle equivalence",
        failures == 0 && secs < 300.0,
        format!(
            "100 instances, failures {failures}, min margin over grid bound {worst_oracle:.3e}, \
             max relative gap to reference {worst_rel:.3e}, {secs:.1} s"
        ),
    )
}

/// Moves `delta` of energy of link `m` from slot `k` to a neighbour when the
/// result stays feasible.
fn perturb(
    inst: &Instance,
    sol: &Solution,
    rng: &mut ChaCha8Rng,
    delta: f64,
) -> Option<Allocation> {
    let links = inst.num_receivers;
    let horizon = inst.horizon;
    for _ in 0..200 {
        let m = rng.random_range(0..links);
        let k = rng.random_range(0..horizon);
        let other = if rng.random_bool(0.5) {
            k.checked_add(1).filter(|&j| j < horizon)
        } else {
            k.checked_sub(1)
        };
        let Some(j) = other else { continue };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut alloc = sol.allocation.clone();
        alloc.p[m][k] += sign * delta;
        alloc.p[m][j] -= sign * delta;
        if check_feasible_tol(inst, &sol.discharge, &alloc, sol.trace.final_eps, 1e-9).is_empty() {
            return Some(alloc);
        }
    }
    None
}

struct KktRun {
    solutions: Vec<(Instance, Solution)>,
}

fn kkt_instances() -> KktRun {
    let cfg = section6_config(10.0, 1, SWEEP.to_vec());
    let solutions = (0..100)
        .map(|t| {
            let mu = SWEEP[t % SWEEP.len()];
            let inst = ehsched::harness::generate_instance(&cfg, mu, t);
            let sol = solve(&inst, &SolveOptions::default()).expect("solve");
            (inst, sol)
        })
        .collect();
    KktRun { solutions }
}

fn kkt_certification(run: &KktRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_residual = 0.0f64;
    let mut flagged = 0;
    let mut cases = 0;
    let mut refused = 0;
    for (inst, sol) in &run.solutions {
        match kkt_residual_tol(
            inst,
            &sol.discharge,
            &sol.allocation,
            sol.trace.final_eps,
            1e-4,
        ) {
            Ok(r) => max_residual = max_residual.max(r.max_residual),
            Err(_) => refused += 1,
        }
        if let Some(alloc) = perturb(inst, sol, &mut rng, 0.05) {
            cases += 1;
            let r = kkt_residual_tol(inst, &sol.discharge, &alloc, sol.trace.final_eps, 1e-4);
            if r.map_or(true, |r| r.max_residual > 1e-2) {
                flagged += 1;
            }
        }
    }
    let share = flagged as f64 / cases.max(1) as f64;
    outcome(
        "KKT certification",
        refused == 0 && max_residual <= 1e-4 && cases > 0 && share >= 0.95,
        format!(
            "100 instances, max residual {max_residual:.3e} (limit 1e-4), infeasible {refused}; \
             perturbations flagged {flagged}/{cases} ({:.1}%)",
            100.0 * share
        ),
    )
}

fn median(v: &mut [usize]) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

fn monotone_convergence(run: &KktRun) -> Outcome {
    let mut worst_drop = 0.0f64;
    let mut iterations = Vec::new();
    let mut per_mu = vec![Vec::new(); SWEEP.len()];
    for (t, (_, sol)) in run.solutions.iter().enumerate() {
        let mut prev = sol.trace.initial_value;
        for &v in &sol.trace.values {
            worst_drop = worst_drop.max(prev - v);
            prev = v;
        }
        if let Some(r) = sol.trace.refined_value {
            worst_drop = worst_drop.max(prev - r);
        }
        iterations.push(sol.trace.iterations());
        per_mu[t % SWEEP.len()].push(sol.trace.iterations());
    }
    let med = median(&mut iterations);
    let per: Vec<String> = SWEEP
        .iter()
        .zip(per_mu.iter_mut())
        .map(|(mu, v)| format!("{mu}:{}", median(v)))
        .collect();
    outcome(
        "monotone convergence",
        worst_drop <= 1e-9 && med <= 10.0,
        format!(
            "largest decrease {worst_drop:.3e}, median iterations {med} over the sweep \
             (per mu_E {})",
            per.join(" ")
        ),
    )
}

fn waterfilling_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let mut cap_binding = 0;
    let mut overflow = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=50);
        let max_power = rng.random_range(0.5..4.0);
        let battery_cap = rng.random_range(0.0..6.0);
        let inc: Vec<f64> = (0..k)
            .map(|_| {
                if rng.random_bool(0.1) {
                    rng.random_range(5.0..15.0)
                } else {
                    rng.random_range(0.0..3.0)
                }
            })
            .collect();
        let gains = vec![(0..k).map(|_| exp_gain(&mut rng)).collect::<Vec<f64>>()];
        let inst = Instance::point_to_point(
            gains,
            vec![cumulative(&inc)],
            vec![max_power],
            vec![battery_cap],
        )
        .expect("valid instance");
        let plan = greedy_discharge(&inst);
        let bandwidth: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let slice = EnergySlice {
            bandwidth: &bandwidth,
            gains: &inst.gains[0],
            budget: &plan.effective[0],
            max_power,
            battery_cap,
        };
        let Ok(sol) = solve_ep(&slice) else {
            failures += 1;
            continue;
        };
        if !verify_water_levels(&sol.energy, &sol.profile, &slice) {
            failures += 1;
        }
        if sol.energy.iter().any(|&p| p >= max_power - 1e-9) {
            cap_binding += 1;
        }
        if plan.discharge[0].iter().any(|&d| d > 0.0) {
            overflow += 1;
        }
    }
    outcome(
        "water-filling structure",
        failures == 0 && cap_binding > 0 && overflow > 0,
        format!(
            "1000 instances, failures {failures}, cap-binding {cap_binding}, overflow-forced {overflow}"
        ),
    )
}

fn bandwidth_fitting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut too_many = 0;
    let mut floor_violations = 0;
    let mut errors = 0;
    for _ in 0..100_000 {
        let n = rng.random_range(1..=64);
        let eps = rng.random_range(0.0..1.0) / n as f64;
        let ph: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    exp_gain(&mut rng) * rng.random_range(0.0..10.0)
                }
            })
            .collect();
        if ph.iter().all(|&x| x == 0.0) {
            continue;
        }
        let Ok(states) = fit_bandwidth_traced(&ph, eps) else {
            errors += 1;
            continue;
        };
        if states.len() > n {
            too_many += 1;
        }
        for s in &states {
            if s.floored
                .iter()
                .any(|&m| ph[m] * s.ratio > eps * (1.0 + 1e-12) + 1e-15)
            {
                floor_violations += 1;
                break;
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=3);
        let eps = rng.random_range(0.0..0.2);
        let ph: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let a = fit_bandwidth(&ph, eps).expect("fit");
        let fitted: f64 = ph.iter().zip(&a).map(|(&x, &s)| link_rate(s, x, 1.0)).sum();
        let (grid, _) = best_split_zoomed(&ph, eps, 0.002, 4);
        worst = worst.max((fitted - grid).abs());
    }
    outcome(
        "bandwidth fitting",
        too_many == 0 && floor_violations == 0 && errors == 0 && worst <= 1e-3,
        format!(
            "1e5 vectors: over N passes {too_many}, floor-condition violations {floor_violations}, \
             errors {errors}; max |fit - grid| on N <= 3 {worst:.3e}"
        ),
    )
}

fn discharge_minimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut positive = 0;
    for _ in 0..50 {
        let k = rng.random_range(1..=4);
        let quarter = |rng: &mut ChaCha8Rng, hi: u32| f64::from(rng.random_range(0..=hi)) * 0.25;
        let inc: Vec<f64> = (0..k).map(|_| quarter(&mut rng, 16)).collect();
        let max_power = quarter(&mut rng, 8).max(0.25);
        let battery_cap = quarter(&mut rng, 8);
        let gains = vec![vec![1.0; k]];
        let inst = Instance::point_to_point(
            gains,
            vec![cumulative(&inc)],
            vec![max_power],
            vec![battery_cap],
        )
        .expect("valid instance");
        let waste: f64 = greedy_discharge(&inst).discharge[0].iter().sum();
        let best = min_discharge_on_grid(&inc, max_power, battery_cap, 0.25);
        if best != Some(waste) {
            mismatches += 1;
        }
        if waste > 0.0 {
            positive += 1;
        }
    }
    outcome(
        "discharge minimality",
        mismatches == 0,
        format!("50 instances, mismatches {mismatches}, instances with forced waste {positive}"),
    )
}

/// Paired mean difference `x - y` over trials and its standard error.
fn paired(trials: &[&TrialReport], x: Policy, y: Policy) -> (f64, f64) {
    let d: Vec<f64> = trials
        .iter()
        .map(|t| t.objectives[&x] - t.objectives[&y])
        .collect();
    ehsched::harness::mean_stderr(&d)
}

fn at(res: &ehsched::harness::CampaignResult, mu: f64) -> Vec<&TrialReport> {
    res.trials.iter().filter(|t| t.mu_e == mu).collect()
}

fn qualitative() -> Outcome {
    let started = Instant::now();
    let p10 = run_campaign(&section6_config(10.0, 200, SWEEP.to_vec())).expect("campaign P=10");
    let p5 = run_campaign(&section6_config(5.0, 200, SWEEP.to_vec())).expect("campaign P=5");
    let secs = started.elapsed().as_secs_f64();
    let mut problems = Vec::new();
    for (label, res) in [("P=10", &p10), ("P=5", &p5)] {
        for t in &res.trials {
            let opt = t.objectives[&Policy::Optimal];
            for (&p, &v) in &t.objectives {
                if v > opt + 1e-9 * opt.abs().max(1.0) {
                    problems.push(format!(
                        "{label} trial {} mu {}: {p} beats optimal",
                        t.trial, t.mu_e
                    ));
                }
            }
        }
    }
    let mut tightest = f64::INFINITY;
    let mut check = |what: String, (mean, se): (f64, f64), problems: &mut Vec<String>| {
        let z = if se > 0.0 {
            mean / se
        } else if mean > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        tightest = tightest.min(z);
        let outside_one_se = mean > se;
        if !outside_one_se {
            problems.push(format!("{what}: difference {mean:.4} with SE {se:.4}"));
        }
    };
    for &mu in &SWEEP {
        let t = at(&p10, mu);
        check(
            format!("P=10 mu {mu} optimal > causal"),
            paired(&t, Policy::Optimal, Policy::Causal),
            &mut problems,
        );
        check(
            format!("P=10 mu {mu} causal > greedy"),
            paired(&t, Policy::Causal, Policy::Greedy),
            &mut problems,
        );
        check(
            format!("P=10 mu {mu} causal > equal"),
            paired(&t, Policy::Causal, Policy::Equal),
            &mut problems,
        );
        if mu >= 6.0 {
            let t5 = at(&p5, mu);
            for other in [
                Policy::Optimal,
                Policy::Causal,
                Policy::Greedy,
                Policy::Equal,
            ] {
                check(
                    format!("P=5 mu {mu} {other} > tdma"),
                    paired(&t5, other, Policy::Tdma),
                    &mut problems,
                );
            }
        }
        let t5 = at(&p5, mu);
        for policy in Policy::ALL {
            let d: Vec<f64> = t
                .iter()
                .zip(&t5)
                .map(|(a, b)| {
                    assert_eq!(a.trial, b.trial);
                    a.objectives[&policy] - b.objectives[&policy]
                })
                .collect();
            check(
                format!("mu {mu} {policy} P=10 > P=5"),
                ehsched::harness::mean_stderr(&d),
                &mut problems,
            );
        }
    }
    let mut detail = format!(
        "2 x 1200 trials in {secs:.0} s, smallest difference/SE {tightest:.2}, {} violations",
        problems.len()
    );
    for p in problems.iter().take(8) {
        detail.push_str("\n    ");
        detail.push_str(p);
    }
    outcome(
        "qualitative reproduction",
        problems.is_empty() && secs < 1800.0,
        detail,
    )
}

fn floor_refinement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let floors = [0.1, 0.05, 0.01, 0.001];
    let mut bad = Vec::new();
    for case in 0..20 {
        let n = 3;
        let k = 6;
        let gains: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| exp_gain(&mut rng)).collect())
            .collect();
        let harvest: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                cumulative(
                    &(0..k)
                        .map(|_| rng.random_range(0.0..4.0))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let inst = Instance::point_to_point(gains, harvest, vec![3.0; n], vec![5.0; n])
            .expect("valid instance");
        let values: Vec<f64> = floors
            .iter()
            .map(|&eps| {
                let r =
                    reference_solve(&inst, eps, &ReferenceOptions::default()).expect("reference");
                debug_assert!(objective(&inst, &r.allocation).is_ok());
                r.objective
            })
            .collect();
        let diffs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
        let tol = 1e-7;
        let nondecreasing = diffs.iter().all(|&d| d >= -tol);
        let shrinking = diffs.windows(2).all(|w| w[1] <= w[0] + tol);
        if !(nondecreasing && shrinking) {
            bad.push(format!("instance {case}: differences {diffs:?}"));
        }
    }
    let mut detail = format!("20 instances, violations {}", bad.len());
    for b in &bad {
        detail.push_str("\n    ");
        detail.push_str(b);
    }
    outcome("floor refinement", bad.is_empty(), detail)
}

fn main() {
    let kkt_run = kkt_instances();
    let checks: Vec<Box<dyn Fn() -> Outcome + '_>> = vec![
        Box::new(oracle_equivalence),
        Box::new(|| kkt_certification(&kkt_run)),
        Box::new(|| monotone_convergence(&kkt_run)),
        Box::new(waterfilling_structure),
        Box::new(bandwidth_fitting),
        Box::new(discharge_minimality),
        Box::new(qualitative),
        Box::new(floor_refinement),
    ];
    let mut failed = 0;
    for check in checks {
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", o.name, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
