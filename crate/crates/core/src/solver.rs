//! The single time-scale method.
//!
//! One iteration from `(x, z, u)`:
//!
//! 1. `y = argmin_{y in X} <z, y - x> + rho/2 |y - x|^2`
//! 2. `tau` from the schedule
//! 3. `x' = x + tau (y - x)`
//! 4. one oracle draw per level at `(x', u_{m+1})`, with the *old* trackers
//! 5. `g_M = J_M`, `g_m = J_mx + J_mu g_{m+1}`
//! 6. `z' = z + a tau (g_1^T - z)`
//! 7. trackers, bottom level first:
//!    `u_M' = u_M + J_M (x' - x) + b tau (h_M - u_M)` and
//!    `u_m' = u_m + J_mx (x' - x) + J_mu (u_{m+1}' - u_{m+1}) + b tau (h_m - u_m)`

use thiserror::Error;

use crate::diagnostics::{self, DiagnosticsConfig, LyapunovConfig, RunRecord, TraceRow};
use crate::feasible::{gap, gap_value, solve_subproblem};
use crate::model::{init_state, AlgorithmParams, CompositionProblem, InitPolicy, IterateState, ModelError};
use crate::oracle::{sample_level, OracleSample};
use crate::rng::{Streams, CALIBRATION_REPLICATION};
use crate::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("the number of iterations must be at least 1")]
    InvalidHorizon,
    #[error(transparent)]
    Setup(ModelError),
    #[error("iteration {iteration}: {source}")]
    Step { iteration: u64, source: ModelError },
    #[error("iteration {iteration}: state became non-finite")]
    NonFinite { iteration: u64 },
}

impl SolverError {
    /// Iteration at which the run failed, if it failed inside the loop.
    pub fn iteration(&self) -> Option<u64> {
        match self {
            SolverError::Step { iteration, .. } | SolverError::NonFinite { iteration } => Some(*iteration),
            _ => None,
        }
    }
}

/// Backward chain rule over the level samples (ordered `1..=M`); returns
/// the `d_1 x n` matrix `g_1`.
pub fn assemble_subgradient(samples: &[OracleSample]) -> Result<Matrix, ModelError> {
    let (last, rest) = samples.split_last().ok_or_else(|| ModelError::Dimension("no level samples".into()))?;
    if last.jacobian.ncols() != last.x_cols {
        return Err(ModelError::Dimension(format!(
            "bottom level Jacobian has {} columns, expected {}",
            last.jacobian.ncols(),
            last.x_cols
        )));
    }
    let mut g = last.jacobian.clone();
    for (i, s) in rest.iter().enumerate().rev() {
        let ju = s.u_block();
        if ju.ncols() != g.nrows() || s.x_cols != g.ncols() {
            return Err(ModelError::Dimension(format!(
                "level {} u-block is {}x{}, cannot multiply a {}x{} inner subgradient",
                i + 1,
                ju.nrows(),
                ju.ncols(),
                g.nrows(),
                g.ncols()
            )));
        }
        g = s.x_block() + ju * g;
    }
    Ok(g)
}

/// `z + a tau (g_1^T - z)`.
pub fn update_z(z: &Vector, g1: &Vector, a: f64, tau: f64) -> Vector {
    z + (g1 - z) * (a * tau)
}

/// Tracker update, bottom level first. `samples` must have been drawn at
/// `(x', u_{m+1})` with the trackers *before* this update.
pub fn update_trackers(u: &[Vector], samples: &[OracleSample], dx: &Vector, b: f64, tau: f64) -> Vec<Vector> {
    let m_levels = u.len();
    let mut next: Vec<Vector> = u.to_vec();
    for m in (0..m_levels).rev() {
        let s = &samples[m];
        let mut v = &u[m] + s.x_block() * dx + (&s.value - &u[m]) * (b * tau);
        if m + 1 < m_levels {
            v += s.u_block() * (&next[m + 1] - &u[m + 1]);
        }
        next[m] = v;
    }
    next
}

/// Everything one iteration produced besides the new state.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub k: u64,
    pub tau: f64,
    pub y: Vector,
    /// `y - x`
    pub d: Vector,
    /// Subproblem value `eta(x^k, z^k)`.
    pub eta: f64,
    /// Assembled `g_1` (as a column).
    pub g1: Vector,
    /// Sampled values `h_m`.
    pub values: Vec<Vector>,
    /// `|J_mu|_F` for each level with an inner argument.
    pub ju_norms: Vec<f64>,
    pub clamp_events: usize,
}

/// One iteration of the method. Samples of iteration `k` come from counter
/// `k + 1` of each level's stream.
pub fn step(
    state: &IterateState,
    problem: &CompositionProblem,
    params: &AlgorithmParams,
    streams: &Streams,
) -> Result<(IterateState, IterationTrace), SolverError> {
    let k = state.k;
    let fail = |source: ModelError| SolverError::Step { iteration: k, source };
    if problem.level_dims.first() != Some(&1) {
        return Err(SolverError::Setup(ModelError::ScalarObjectiveRequired(
            problem.level_dims.first().copied().unwrap_or(0),
        )));
    }
    let y = solve_subproblem(&problem.feasible_set, &state.x, &state.z, params.rho)
        .map_err(|e| fail(e.into()))?;
    let d = &y - &state.x;
    let eta = gap_value(&state.z, &d, params.rho);
    let tau = params.stepsize(k).map_err(fail)?;
    let x_next = &state.x + &d * tau;

    let m_levels = problem.levels();
    let mut samples = Vec::with_capacity(m_levels);
    for m in 1..=m_levels {
        let inner = if m < m_levels { Some(&state.u[m]) } else { None };
        let mut rng = streams.level(m, k + 1);
        let s = sample_level(problem.oracles[m - 1].as_ref(), &x_next, inner, k, &mut rng)
            .map_err(|source| fail(ModelError::Oracle { level: m, source }))?;
        samples.push(s);
    }
    let g = assemble_subgradient(&samples).map_err(fail)?;
    let g1 = g.row(0).transpose();
    let z_next = update_z(&state.z, &g1, params.a, tau);
    let dx = &x_next - &state.x;
    let u_next = update_trackers(&state.u, &samples, &dx, params.b, tau);

    let next = IterateState { k: k + 1, x: x_next, z: z_next, u: u_next };
    if !next.is_finite() {
        return Err(SolverError::NonFinite { iteration: k });
    }
    let trace = IterationTrace {
        k,
        tau,
        y,
        d,
        eta,
        g1,
        ju_norms: samples[..m_levels - 1].iter().map(|s| s.u_block().norm()).collect(),
        clamp_events: samples.iter().filter(|s| s.clamped).count(),
        values: samples.into_iter().map(|s| s.value).collect(),
    };
    Ok((next, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub iterations: usize,
    pub replication: u64,
    /// Starting point before projection; defaults to the projection of 0.
    pub init_x: Option<Vector>,
    pub init_policy: InitPolicy,
    pub diagnostics: DiagnosticsConfig,
}

impl RunOptions {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            replication: 0,
            init_x: None,
            init_policy: InitPolicy::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Initial state for `options`.
pub fn initial_state(
    problem: &CompositionProblem,
    params: &AlgorithmParams,
    options: &RunOptions,
) -> Result<IterateState, SolverError> {
    let x0 = options.init_x.clone().unwrap_or_else(|| Vector::zeros(problem.n));
    init_state(problem, params, &x0, options.init_policy, options.replication).map_err(SolverError::Setup)
}

/// Run `options.iterations` steps and collect diagnostics.
pub fn run(problem: &CompositionProblem, params: &AlgorithmParams, options: &RunOptions) -> Result<RunRecord, SolverError> {
    if options.iterations == 0 {
        return Err(SolverError::InvalidHorizon);
    }
    params.validate().map_err(SolverError::Setup)?;
    if problem.level_dims.first() != Some(&1) {
        return Err(SolverError::Setup(ModelError::ScalarObjectiveRequired(
            problem.level_dims.first().copied().unwrap_or(0),
        )));
    }
    let state = initial_state(problem, params, options)?;
    run_from(problem, params, options, state)
}

/// Like [`run`], but from an explicit initial state.
pub fn run_from(
    problem: &CompositionProblem,
    params: &AlgorithmParams,
    options: &RunOptions,
    mut state: IterateState,
) -> Result<RunRecord, SolverError> {
    if options.iterations == 0 {
        return Err(SolverError::InvalidHorizon);
    }
    let diag = &options.diagnostics;
    let m_levels = problem.levels();
    let have_exact = problem.exact.is_some();
    let gammas = match &diag.lyapunov {
        LyapunovConfig::Off => None,
        _ if !have_exact => None,
        LyapunovConfig::Weights(w) => Some(w.clone()),
        LyapunovConfig::Auto => Some(calibrate_gammas(problem, params, options)?),
    };
    let streams = Streams::new(params.seed, options.replication);
    let mut record = RunRecord::new(m_levels, params.seed, options.replication);
    record.gammas = gammas.clone();
    record.observe_state(&state);

    for _ in 0..options.iterations {
        let k = state.k;
        let (next, trace) = step(&state, problem, params, &streams)?;
        if diag.keep_rows {
            let diag_err = |source| SolverError::Step { iteration: k, source };
            let mut row = TraceRow::new(k, trace.tau, trace.d.norm_squared(), trace.eta);
            if have_exact && diag.tracking {
                row.tracking = Some(diagnostics::tracking_errors(problem, &state.x, &state.u).map_err(diag_err)?);
            }
            let exact_row = have_exact && diag.exact_every > 0 && k.is_multiple_of(diag.exact_every as u64);
            if exact_row {
                let values = problem.exact_nested_values(&state.x).map_err(diag_err)?;
                row.exact_residuals =
                    Some(values.iter().zip(&state.u).map(|(f, u)| (f - u).norm()).collect());
                row.f1 = Some(values[0][0]);
                if let Some(g) = &gammas {
                    let w = diagnostics::lyapunov_nonsmooth(problem, &state, params.a, params.rho, g)
                        .map_err(diag_err)?;
                    let ws = diagnostics::lyapunov_smooth(problem, &state, params.a, params.rho, g)
                        .map_err(diag_err)?;
                    row.lyapunov = Some(w);
                    row.lyapunov_smooth = Some(ws);
                }
            }
            record.rows.push(row);
        }
        record.observe_trace(&trace);
        record.observe_state(&next);
        state = next;
    }
    let final_gap = gap(&problem.feasible_set, &state.x, &state.z, params.rho)
        .map_err(|e| SolverError::Step { iteration: state.k, source: e.into() })?;
    record.final_eta = final_gap.eta;
    record.final_d_norm_sq = (&final_gap.y - &state.x).norm_squared();
    record.final_state = Some(state);
    Ok(record)
}

/// Lyapunov weights `gamma_m = a L^{m-1} + 1` (m = 2..M), where `L` is the
/// largest `|J_mu|` seen during a short calibration run.
pub fn calibrate_gammas(
    problem: &CompositionProblem,
    params: &AlgorithmParams,
    options: &RunOptions,
) -> Result<Vec<f64>, SolverError> {
    let calib = RunOptions {
        iterations: options.iterations.min(200),
        replication: CALIBRATION_REPLICATION | options.replication,
        init_x: options.init_x.clone(),
        init_policy: options.init_policy,
        diagnostics: DiagnosticsConfig { keep_rows: false, lyapunov: LyapunovConfig::Off, ..DiagnosticsConfig::default() },
    };
    let rec = run(problem, params, &calib)?;
    let l_hat = rec.max_ju_norm.iter().copied().fold(0.0, f64::max);
    Ok(diagnostics::default_gammas(params.a, l_hat, problem.levels()))
}
