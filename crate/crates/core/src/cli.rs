//! JSON experiment configuration and the command implementations behind the
//! `nestcomp` binary.
//!
//! A configuration file looks like
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 7,
//!   "problem": {"family": "synthetic_smooth", "n": 5, "levels": 3},
//!   "params": {"a": 1.0, "b": 1.0, "rho": 1.0,
//!              "schedule": {"type": "diminishing", "tau0": 1.0, "gamma": 0.75}},
//!   "iterations": 1000,
//!   "init": {"policy": "one_sample"},
//!   "diagnostics": {"exact_every": 10},
//!   "rate_experiment": {"horizons": [100, 1000, 10000], "replications": 20}
//! }
//! ```
//!
//! `iterations` is needed by `run`, `rate_experiment` by `rate-experiment`.
//! Errors in the file map to exit code 1, failures while running to 2.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::diagnostics::{
    self, derive_state_bounds, optimality_measure, random_iterate_measure, tracking_error_bound_check,
    DiagnosticsConfig, HorizonTracking, LevelTrackingReport, LyapunovConfig, MeasureMode, ReplicationTracking,
    TRACE_SCHEMA_VERSION,
};
use crate::model::{validate_problem, AlgorithmParams, CompositionProblem, InitPolicy, ModelError, StepSchedule};
use crate::problems::ProblemSpec;
use crate::rng::Streams;
use crate::solver::{run, RunOptions, SolverError};
use crate::Vector;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Setup(inner) => CliError::Config(inner.to_string()),
            SolverError::InvalidHorizon => CliError::Config(format!("iterations: {e}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub schedule: StepSchedule,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub policy: InitPolicy,
    /// Starting point (projected onto the feasible set); defaults to 0.
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub horizons: Vec<usize>,
    pub replications: usize,
    /// Constant stepsize `theta / sqrt(N)`, clipped to the admissible cap.
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_theta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub problem: serde_json::Value,
    pub params: ParamsConfig,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub rate_experiment: Option<RateConfig>,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Command-line overrides shared by all commands.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// A parsed configuration with its problem built.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub raw: serde_json::Value,
    pub problem: CompositionProblem,
    pub params: AlgorithmParams,
}

impl Loaded {
    pub fn run_options(&self, iterations: usize, replication: u64) -> RunOptions {
        RunOptions {
            iterations,
            replication,
            init_x: self.config.init.x.as_ref().map(|v| Vector::from_column_slice(v)),
            init_policy: self.config.init.policy,
            diagnostics: self.config.diagnostics.clone(),
        }
    }
}

pub fn parse_config(text: &str) -> Result<(ExperimentConfig, serde_json::Value), CliError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let config: ExperimentConfig = serde_json::from_value(raw.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    if config.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
            config.schema_version
        )));
    }
    Ok((config, raw))
}

/// Parse, apply overrides, build and structurally validate the problem.
pub fn load(config_path: &Path, opts: &CliOptions) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let (mut config, raw) = parse_config(&text)?;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    let base_dir = config_path.parent();
    let problem = ProblemSpec::from_json(&config.problem)
        .and_then(|spec| spec.build(base_dir))
        .map_err(|e| CliError::Config(format!("problem: {e}")))?;
    let violations = validate_problem(&problem);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Config(format!("problem: {}", list.join("; "))));
    }
    let p = &config.params;
    let params = AlgorithmParams::new(p.a, p.b, p.rho, p.schedule.clone(), config.seed);
    params.validate().map_err(|e| CliError::Config(format!("params: {e}")))?;
    if let Some(x) = &config.init.x {
        if x.len() != problem.n {
            return Err(CliError::Config(format!("init.x: length {} but problem has n = {}", x.len(), problem.n)));
        }
    }
    if let LyapunovConfig::Weights(w) = &config.diagnostics.lyapunov {
        if w.len() != problem.levels() - 1 || w.iter().any(|g| !(*g > 0.0)) {
            return Err(CliError::Config(format!(
                "diagnostics.lyapunov: expected {} positive weights",
                problem.levels() - 1
            )));
        }
    }
    Ok(Loaded { config, raw, problem, params })
}

fn out_dir(opts: &CliOptions, config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = opts.out.clone().or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    builder.build().map_err(|e| CliError::Runtime(e.to_string()))
}

fn vec_json(v: &Vector) -> serde_json::Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

/// `run`: one run, writes `trace.csv` and `summary.json`.
pub fn cmd_run(config_path: &Path, opts: &CliOptions) -> Result<PathBuf, CliError> {
    let loaded = load(config_path, opts)?;
    let iterations = loaded
        .config
        .iterations
        .ok_or_else(|| CliError::Config("missing field `iterations`".into()))?;
    if iterations == 0 {
        return Err(CliError::Config("iterations: must be at least 1".into()));
    }
    let dir = out_dir(opts, &loaded.config)?;
    let problem = &loaded.problem;
    let record = run(problem, &loaded.params, &loaded.run_options(iterations, 0))?;

    let trace_path = dir.join("trace.csv");
    let file = fs::File::create(&trace_path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", trace_path.display())))?;
    record
        .write_csv(BufWriter::new(file))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", trace_path.display())))?;

    let state = record.final_state.as_ref().expect("run fills the final state");
    let mut summary = json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "trace_schema_version": TRACE_SCHEMA_VERSION,
        "problem": problem.name,
        "n": problem.n,
        "levels": problem.levels(),
        "seed": loaded.params.seed,
        "iterations": record.iterations,
        "final": {
            "x": vec_json(&state.x),
            "z": vec_json(&state.z),
            "u": state.u.iter().map(vec_json).collect::<Vec<_>>(),
            "eta": record.final_eta,
            "d_norm_sq": record.final_d_norm_sq,
        },
        "max_z_norm": record.max_z_norm,
        "max_u_norm": record.max_u_norm,
        "max_ju_norm": record.max_ju_norm,
        "clamp_events": record.clamp_events,
        "gammas": record.gammas,
        "f1_tail_oscillation": record.f1_tail_oscillation(),
        "config": loaded.raw,
    });
    if let Some(exact) = &problem.exact {
        let values = problem
            .exact_nested_values(&state.x)
            .map_err(|e| CliError::Runtime(format!("final evaluation: {e}")))?;
        summary["final"]["f1"] = json!(values[0][0]);
        summary["final"]["exact_residuals"] =
            json!(values.iter().zip(&state.u).map(|(f, u)| (f - u).norm()).collect::<Vec<f64>>());
        if let Some(sol) = &exact.solution {
            summary["final"]["distance_to_solution"] = json!((&state.x - sol).norm());
        }
        if let Some(v) = exact.optimal_value {
            summary["optimal_value"] = json!(v);
        }
        if let Ok(bounds) = derive_state_bounds(problem, 200, loaded.params.seed) {
            summary["state_bounds"] = json!(bounds);
            summary["within_state_bounds"] = json!(record.max_z_norm <= bounds.z && record.max_u_norm <= bounds.u);
        }
    }
    if let Ok(series) = optimality_measure(&record, MeasureMode::Squared) {
        let mut rng = Streams::new(loaded.params.seed, 0).selector(record.iterations);
        if let Ok(r) = random_iterate_measure(&series, &mut rng) {
            summary["random_iterate"] = json!({"index": r.index, "measure_sq": r.value, "mean_measure_sq": r.mean});
        }
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(dir)
}

/// Outcome of one constant-stepsize replication of the rate experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationSummary {
    pub replication: u64,
    /// Mean of the Squared measure over `k = 0..N-1`, i.e. its expectation
    /// over a uniformly drawn `R`.
    pub measure_sq: f64,
    pub measure_mixed: f64,
    /// The Squared measure at the drawn `R`.
    pub r_index: usize,
    pub measure_sq_at_r: f64,
    /// `t_m^0`, squared, for `m = 1..=M`.
    pub initial_tracking_sq: Vec<f64>,
    /// Mean over `k` of `(t_m^k)^2`.
    pub tracking_sq: Vec<f64>,
    pub max_z_norm: f64,
    pub max_u_norm: f64,
    pub finite: bool,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonSummary {
    pub n: usize,
    pub tau: f64,
    pub mean_measure_sq: f64,
    pub mean_measure_mixed: f64,
    pub mean_measure_sq_at_r: f64,
    pub mean_tracking_sq: Vec<f64>,
    pub replications: Vec<ReplicationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub schema_version: u32,
    pub seed: u64,
    pub theta: f64,
    pub replications: usize,
    pub horizons: Vec<HorizonSummary>,
    /// Log-log slope of `mean_measure_sq` against `N`.
    pub slope: f64,
    /// Same fit using the measure at the drawn `R`.
    pub slope_at_r: Option<f64>,
    pub tracking: Vec<LevelTrackingReport>,
}

/// One replication with constant stepsize `tau` for `n` iterations.
pub fn rate_replication(
    problem: &CompositionProblem,
    params: &AlgorithmParams,
    base: &RunOptions,
    n: usize,
    tau: f64,
    replication: u64,
) -> Result<ReplicationSummary, SolverError> {
    let mut p = params.clone();
    p.schedule = StepSchedule::Constant { tau };
    let options = RunOptions {
        iterations: n,
        replication,
        diagnostics: DiagnosticsConfig { tracking: true, exact_every: 0, lyapunov: LyapunovConfig::Off, keep_rows: true },
        ..base.clone()
    };
    let record = run(problem, &p, &options)?;
    let missing = |_| SolverError::Setup(ModelError::MissingExact);
    let sq = optimality_measure(&record, MeasureMode::Squared).map_err(missing)?;
    let mixed = optimality_measure(&record, MeasureMode::Mixed).map_err(missing)?;
    let mut rng = Streams::new(p.seed, replication).selector(n as u64);
    let r = random_iterate_measure(&sq, &mut rng).expect("n >= 1");
    let levels = problem.levels();
    let mut tracking_sq = vec![0.0; levels];
    for row in &record.rows {
        for (acc, t) in tracking_sq.iter_mut().zip(row.tracking.as_ref().expect("tracking enabled")) {
            *acc += t * t;
        }
    }
    tracking_sq.iter_mut().for_each(|v| *v /= n as f64);
    let initial = record.rows[0].tracking.as_ref().expect("tracking enabled").iter().map(|t| t * t).collect();
    let finite = record.final_state.as_ref().is_some_and(|s| s.is_finite())
        && sq.iter().all(|v| v.is_finite())
        && record.max_z_norm.is_finite()
        && record.max_u_norm.is_finite();
    Ok(ReplicationSummary {
        replication,
        measure_sq: r.mean,
        measure_mixed: mixed.iter().sum::<f64>() / n as f64,
        r_index: r.index,
        measure_sq_at_r: r.value,
        initial_tracking_sq: initial,
        tracking_sq,
        max_z_norm: record.max_z_norm,
        max_u_norm: record.max_u_norm,
        finite,
        clamp_events: record.clamp_events,
    })
}

/// Replications run on `threads` workers; results are merged in
/// replication order, so the report does not depend on the thread count.
pub fn rate_experiment(loaded: &Loaded, rate: &RateConfig, threads: Option<usize>) -> Result<RateReport, CliError> {
    if rate.replications == 0 {
        return Err(CliError::Config("rate_experiment.replications: must be at least 1".into()));
    }
    if rate.horizons.is_empty() || rate.horizons.contains(&0) {
        return Err(CliError::Config("rate_experiment.horizons: need positive horizons".into()));
    }
    if !(rate.theta > 0.0 && rate.theta.is_finite()) {
        return Err(CliError::Config("rate_experiment.theta: must be positive".into()));
    }
    if loaded.problem.exact.is_none() {
        return Err(CliError::Config("problem: the rate experiment needs exact evaluators".into()));
    }
    let pool = thread_pool(threads)?;
    let base = loaded.run_options(1, 0);
    let cap = loaded.params.step_cap();
    let jobs: Vec<(usize, usize, u64)> = rate
        .horizons
        .iter()
        .enumerate()
        .flat_map(|(h, &n)| (0..rate.replications as u64).map(move |r| (h, n, r)))
        .collect();
    let results: Vec<Result<ReplicationSummary, SolverError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(_, n, r)| {
                let tau = (rate.theta / (n as f64).sqrt()).min(cap);
                rate_replication(&loaded.problem, &loaded.params, &base, n, tau, r)
            })
            .collect()
    });
    let mut per_horizon: Vec<Vec<ReplicationSummary>> = vec![Vec::new(); rate.horizons.len()];
    for ((h, n, r), res) in jobs.iter().zip(results) {
        let s = res.map_err(|e| match e {
            SolverError::Setup(_) | SolverError::InvalidHorizon => CliError::from(e),
            other => CliError::Runtime(format!("N = {n}, replication {r}: {other}")),
        })?;
        per_horizon[*h].push(s);
    }

    let mean = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() / rate.replications as f64;
    let levels = loaded.problem.levels();
    let horizons: Vec<HorizonSummary> = rate
        .horizons
        .iter()
        .zip(per_horizon)
        .map(|(&n, reps)| HorizonSummary {
            n,
            tau: (rate.theta / (n as f64).sqrt()).min(cap),
            mean_measure_sq: mean(&mut reps.iter().map(|r| r.measure_sq)),
            mean_measure_mixed: mean(&mut reps.iter().map(|r| r.measure_mixed)),
            mean_measure_sq_at_r: mean(&mut reps.iter().map(|r| r.measure_sq_at_r)),
            mean_tracking_sq: (0..levels).map(|m| mean(&mut reps.iter().map(|r| r.tracking_sq[m]))).collect(),
            replications: reps,
        })
        .collect();

    let fit = |f: &dyn Fn(&HorizonSummary) -> f64| {
        diagnostics::fit_rate(&horizons.iter().map(|h| (h.n as f64, f(h))).collect::<Vec<_>>())
    };
    let slope = fit(&|h| h.mean_measure_sq).map_err(|e| CliError::Runtime(format!("rate fit: {e}")))?;
    let slope_at_r = fit(&|h| h.mean_measure_sq_at_r).ok();
    let tracking_data: Vec<HorizonTracking> = horizons
        .iter()
        .map(|h| HorizonTracking {
            horizon: h.n,
            replications: h
                .replications
                .iter()
                .map(|r| ReplicationTracking { initial_sq: r.initial_tracking_sq.clone(), reported_sq: r.tracking_sq.clone() })
                .collect(),
        })
        .collect();
    let tracking = tracking_error_bound_check(&tracking_data, loaded.params.b).unwrap_or_default();
    Ok(RateReport {
        schema_version: RATE_SCHEMA_VERSION,
        seed: loaded.params.seed,
        theta: rate.theta,
        replications: rate.replications,
        horizons,
        slope,
        slope_at_r,
        tracking,
    })
}

/// `rate-experiment`: writes `rate.json`.
pub fn cmd_rate_experiment(config_path: &Path, opts: &CliOptions) -> Result<(PathBuf, RateReport), CliError> {
    let loaded = load(config_path, opts)?;
    let rate = loaded
        .config
        .rate_experiment
        .clone()
        .ok_or_else(|| CliError::Config("missing field `rate_experiment`".into()))?;
    if rate.replications == 0 {
        return Err(CliError::Config("rate_experiment.replications: must be at least 1".into()));
    }
    let dir = out_dir(opts, &loaded.config)?;
    let report = rate_experiment(&loaded, &rate, opts.threads)?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_json(&dir.join("rate.json"), &value)?;
    Ok((dir, report))
}

/// `validate`: schema and structural checks only.
pub fn cmd_validate(config_path: &Path, opts: &CliOptions) -> Result<(), CliError> {
    load(config_path, opts).map(|_| ())
}
