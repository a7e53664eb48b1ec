//! Command-line front end: subcommand grammar, JSON and CSV I/O with atomic
//! writes, and per-stage timings on stderr as JSON lines.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 certification failure,
//! 3 invalid input.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::discharge::greedy_discharge;
use crate::harness::{
    causal_state, generate_instance, run_campaign, summary_csv, trials_jsonl, CampaignConfig,
    HarnessError,
};
use crate::model::{objective, Allocation, Instance};
use crate::policies::{
    causal_policy, equal_bandwidth_policy, greedy_policy, tdma_greedy_policy, Policy,
};
use crate::scheduler::{solve, solve_general_stub, SolveOptions, REFERENCE_SIZE_LIMIT};
use crate::verify::kkt::{kkt_residual_tol, KktError, DEFAULT_TOLERANCE};

#[derive(Debug, Parser)]
#[command(
    name = "ehsched",
    version,
    about = "Energy-harvesting bandwidth scheduler"
)]
pub struct Cli {
    /// Overrides the seed of a campaign config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for campaigns and parallel solves.
    #[arg(long, global = true, env = "EHSCHED_THREADS")]
    pub threads: Option<usize>,
    /// KKT certification tolerance.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
    /// Omit the creation timestamp from JSON outputs.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draws one instance from a campaign config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Mean harvest; defaults to the first sweep point.
        #[arg(long)]
        mu_e: Option<f64>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Computes the optimal schedule of an instance.
    Solve {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eps0: Option<f64>,
        /// Relative stopping tolerance of the alternating loop.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Return the alternating loop's allocation at its last floor.
        #[arg(long)]
        no_refine: bool,
        /// Bandwidth floor for instances outside the point-to-point case.
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
    },
    /// Runs one policy on an instance.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checks an allocation against the KKT conditions; exits 2 when it fails.
    Certify {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output of `solve` or `simulate`, or a bare allocation.
        #[arg(long)]
        allocation: PathBuf,
        /// Bandwidth floor; defaults to the final floor recorded by `solve`.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a Monte Carlo campaign and writes the CSV summary.
    Campaign {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-trial JSONL; defaults to the summary path with a `.jsonl` extension.
        #[arg(long)]
        trials_out: Option<PathBuf>,
        /// Where the instance of a failed certification is written.
        #[arg(long)]
        repro: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Certification(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Certification(_) => 2,
            Failure::Invalid(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Certification(m) | Failure::Runtime(m) => m,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn runtime(err: impl std::fmt::Display) -> Failure {
    Failure::Runtime(err.to_string())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(invalid("invalid value for `threads`: must be at least 1"));
        }
        // A pool built earlier in the same process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    if let Some(tol) = cli.tolerance {
        if !(tol > 0.0) {
            return Err(invalid("invalid value for `tolerance`: must be positive"));
        }
    }
    match &cli.command {
        Command::Generate {
            config,
            mu_e,
            trial,
            out,
        } => generate(cli, config, *mu_e, *trial, out),
        Command::Solve {
            input,
            out,
            eps0,
            delta,
            max_iters,
            no_refine,
            eps,
        } => {
            let mut opts = SolveOptions {
                eps0: *eps0,
                refine: if *no_refine {
                    None
                } else {
                    SolveOptions::default().refine
                },
                ..SolveOptions::default()
            };
            if let Some(d) = delta {
                opts.delta = *d;
            }
            if let Some(m) = max_iters {
                opts.max_iters = *m;
            }
            solve_cmd(cli, input, out, &opts, *eps)
        }
        Command::Simulate { input, policy, out } => simulate(cli, input, *policy, out),
        Command::Certify {
            input,
            allocation,
            eps,
            out,
        } => certify(cli, input, allocation, *eps, out.as_deref()),
        Command::Campaign {
            config,
            out,
            trials_out,
            repro,
        } => campaign(cli, config, out, trials_out.as_deref(), repro.as_deref()),
    }
}

/// Runs `f` and logs its wall time as one JSON line on stderr.
fn stage<T>(name: &str, f: impl FnOnce() -> T) -> T {
    let started = Instant::now();
    let out = f();
    eprintln!(
        "{}",
        json!({"stage": name, "secs": started.elapsed().as_secs_f64()})
    );
    out
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

/// Writes `contents` through a temporary file in the target directory, so
/// a failure never leaves a partial file behind.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(runtime)?;
    tmp.write_all(contents).map_err(runtime)?;
    tmp.as_file().sync_all().map_err(runtime)?;
    tmp.persist(path).map_err(|e| runtime(e.error))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Adds the creation time, or with `--no-timestamp` strips every
/// wall-clock field so reruns are byte-identical.
fn stamp(cli: &Cli, mut value: Value) -> Value {
    if cli.no_timestamp {
        if let Some(trace) = value.pointer_mut("/solution/trace") {
            if let Some(map) = trace.as_object_mut() {
                map.remove("iteration_secs");
            }
        }
    } else {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        value["created_unix"] = json!(secs);
    }
    value
}

fn load_instance(path: &Path) -> Result<Instance, Failure> {
    let text = read(path)?;
    stage("parse_instance", || Instance::from_json(&text)).map_err(|e| invalid(e.to_string()))
}

fn load_config(cli: &Cli, path: &Path) -> Result<CampaignConfig, Failure> {
    let text = read(path)?;
    let mut cfg: CampaignConfig = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("invalid campaign config: {e}")))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(tol) = cli.tolerance {
        cfg.kkt_tolerance = tol;
    }
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cfg)
}

fn generate(
    cli: &Cli,
    config: &Path,
    mu_e: Option<f64>,
    trial: usize,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = load_config(cli, config)?;
    let mu = mu_e.unwrap_or(cfg.mu_e[0]);
    if !mu.is_finite() || mu < 0.0 {
        return Err(invalid(
            "invalid value for `mu_e`: must be finite and nonnegative",
        ));
    }
    let inst = stage("generate", || generate_instance(&cfg, mu, trial));
    write_json(out, &inst)
}

fn solve_cmd(
    cli: &Cli,
    input: &Path,
    out: &Path,
    opts: &SolveOptions,
    eps: f64,
) -> Result<(), Failure> {
    let inst = load_instance(input)?;
    let value = if inst.is_point_to_point() {
        let sol = stage("solve", || solve(&inst, opts)).map_err(|e| match e {
            crate::scheduler::SolveError::InvalidOption(field) => {
                invalid(format!("invalid value for `{field}`"))
            }
            other => runtime(other),
        })?;
        let obj = sol.trace.final_value();
        json!({"objective": obj, "solution": sol})
    } else {
        if !(eps > 0.0) || eps * inst.num_receivers as f64 > 1.0 {
            return Err(invalid("invalid value for `eps`"));
        }
        let sol = stage("reference_solve", || {
            solve_general_stub(&inst, eps, REFERENCE_SIZE_LIMIT)
        })
        .map_err(runtime)?;
        json!({"objective": sol.objective, "eps": eps, "delegated": sol})
    };
    stage("write", || write_json(out, &stamp(cli, value)))
}

fn simulate(cli: &Cli, input: &Path, policy: Policy, out: &Path) -> Result<(), Failure> {
    let inst = load_instance(input)?;
    let alloc = stage(policy.name(), || -> Result<Allocation, Failure> {
        match policy {
            Policy::Optimal => solve(&inst, &SolveOptions::default())
                .map(|s| s.allocation)
                .map_err(runtime),
            Policy::Causal => {
                let init = crate::harness::CausalInit::default();
                causal_policy(&inst, causal_state(&init, &inst))
                    .map(|r| r.allocation)
                    .map_err(runtime)
            }
            Policy::Greedy => greedy_policy(&inst).map_err(runtime),
            Policy::Tdma => tdma_greedy_policy(&inst).map_err(runtime),
            Policy::Equal => equal_bandwidth_policy(&inst).map_err(runtime),
        }
    })?;
    let obj = objective(&inst, &alloc).map_err(runtime)?;
    let value = json!({"policy": policy, "objective": obj, "allocation": alloc});
    stage("write", || write_json(out, &stamp(cli, value)))
}

/// Allocation and recorded floor from a `solve`/`simulate` output or a bare allocation.
fn load_allocation(path: &Path) -> Result<(Allocation, Option<f64>), Failure> {
    let text = read(path)?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("invalid allocation: {e}")))?;
    let eps = value
        .pointer("/solution/trace/final_eps")
        .and_then(Value::as_f64);
    let node = value
        .pointer("/solution/allocation")
        .or_else(|| value.get("allocation"))
        .unwrap_or(&value)
        .clone();
    let alloc: Allocation =
        serde_json::from_value(node).map_err(|e| invalid(format!("invalid allocation: {e}")))?;
    Ok((alloc, eps))
}

fn certify(
    cli: &Cli,
    input: &Path,
    allocation: &Path,
    eps: Option<f64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let inst = load_instance(input)?;
    let (alloc, recorded) = load_allocation(allocation)?;
    let shape_ok = alloc.p.len() == inst.num_receivers
        && alloc.a.len() == inst.num_receivers
        && alloc
            .p
            .iter()
            .chain(&alloc.a)
            .all(|r| r.len() == inst.horizon);
    if !shape_ok {
        return Err(invalid("invalid allocation: `p` and `a` must be M x K"));
    }
    let eps = eps.or(recorded).ok_or_else(|| {
        invalid("missing field `eps`: pass --eps for allocations not produced by solve")
    })?;
    if !(eps >= 0.0) || eps * inst.num_receivers as f64 > 1.0 {
        return Err(invalid("invalid value for `eps`"));
    }
    let tol = cli.tolerance.unwrap_or(DEFAULT_TOLERANCE);
    let plan = greedy_discharge(&inst);
    let result = stage("certify", || {
        kkt_residual_tol(&inst, &plan, &alloc, eps, tol)
    });
    let (value, failure) = match result {
        Ok(report) => {
            let failure = (!report.certified).then(|| {
                Failure::Certification(format!(
                    "KKT residual {:.3e} exceeds tolerance {tol:.3e}",
                    report.max_residual
                ))
            });
            (json!({"eps": eps, "report": report}), failure)
        }
        Err(KktError::Infeasible(violations)) => {
            let msg = KktError::Infeasible(violations.clone()).to_string();
            (
                json!({"eps": eps, "infeasible": violations.iter().map(ToString::to_string).collect::<Vec<_>>()}),
                Some(Failure::Certification(msg)),
            )
        }
    };
    let value = stamp(cli, value);
    match out {
        Some(path) => write_json(path, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value).map_err(runtime)?),
    }
    failure.map_or(Ok(()), Err)
}

fn campaign(
    cli: &Cli,
    config: &Path,
    out: &Path,
    trials_out: Option<&Path>,
    repro: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(cli, config)?;
    match stage("campaign", || run_campaign(&cfg)) {
        Ok(result) => {
            let jsonl_path =
                trials_out.map_or_else(|| out.with_extension("jsonl"), Path::to_path_buf);
            write_atomic(out, summary_csv(&result.summary).as_bytes())?;
            write_atomic(&jsonl_path, trials_jsonl(&result.trials).as_bytes())
        }
        Err(HarnessError::Certification {
            trial,
            mu_e,
            residual,
            instance,
            report,
        }) => {
            let path = repro.map_or_else(|| out.with_extension("repro.json"), Path::to_path_buf);
            write_json(
                &path,
                &json!({"trial": trial, "mu_e": mu_e, "instance": instance, "report": report}),
            )?;
            Err(Failure::Certification(format!(
                "trial {trial} at mu_E = {mu_e} failed certification (max residual {residual:.3e}); instance written to {}",
                path.display()
            )))
        }
        Err(HarnessError::Config(m)) => Err(invalid(m)),
        Err(e) => Err(runtime(e)),
    }
}
