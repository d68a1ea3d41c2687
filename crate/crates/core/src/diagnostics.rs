//! Run records and the quantities used to judge a run: gap, tracking
//! errors, optimality measures, Lyapunov values and empirical rates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io;
use thiserror::Error;

use crate::feasible::gap;
use crate::model::{CompositionProblem, IterateState, ModelError};
use crate::oracle::{sample_level, OracleSample};
use crate::rng::{stream, StreamRng};
use crate::solver::{assemble_subgradient, IterationTrace};
use crate::Vector;

/// Version of the `trace.csv` column layout.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("record has no tracking columns (problem has no exact evaluators)")]
    MissingTracking,
    #[error("rate fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("rate fit needs horizons spanning at least two decades, got ratio {0}")]
    NarrowSpan(f64),
    #[error("measure {value} at N = {n} is not positive; the logarithm is undefined")]
    NonPositive { n: f64, value: f64 },
    #[error("at least 10 replications are required, got {0}")]
    InsufficientReplications(usize),
    #[error("empty series")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovConfig {
    #[default]
    Off,
    /// Weights `a L^{m-1} + 1` from a short calibration run.
    Auto,
    /// Explicit weights for levels `2..=M`.
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Per-iteration tracking errors (needs exact evaluators).
    pub tracking: bool,
    /// Interval for exact residuals `|F_m(x) - u_m|`, `F_1` and Lyapunov
    /// values; 0 disables them.
    pub exact_every: usize,
    pub lyapunov: LyapunovConfig,
    /// Keep per-iteration rows; when false only the summary fields are filled.
    pub keep_rows: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { tracking: true, exact_every: 10, lyapunov: LyapunovConfig::Off, keep_rows: true }
    }
}

/// Diagnostics of iteration `k`, evaluated at the state `(x^k, z^k, u^k)`
/// the iteration started from.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: u64,
    pub tau: f64,
    /// `|y^k - x^k|^2`
    pub d_norm_sq: f64,
    /// `eta(x^k, z^k)`
    pub eta: f64,
    /// `|f_m(x^k, u_{m+1}^k) - u_m^k|` for `m = 1..=M`.
    pub tracking: Option<Vec<f64>>,
    /// `|F_m(x^k) - u_m^k|` for `m = 1..=M`.
    pub exact_residuals: Option<Vec<f64>>,
    pub f1: Option<f64>,
    pub lyapunov: Option<f64>,
    pub lyapunov_smooth: Option<f64>,
}

impl TraceRow {
    pub fn new(k: u64, tau: f64, d_norm_sq: f64, eta: f64) -> Self {
        Self { k, tau, d_norm_sq, eta, tracking: None, exact_residuals: None, f1: None, lyapunov: None, lyapunov_smooth: None }
    }

    pub fn measure(&self, mode: MeasureMode) -> Option<f64> {
        self.tracking.as_ref().map(|t| measure_value(self.d_norm_sq, t, mode))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub levels: usize,
    pub seed: u64,
    pub replication: u64,
    pub rows: Vec<TraceRow>,
    pub final_state: Option<IterateState>,
    pub final_eta: f64,
    pub final_d_norm_sq: f64,
    pub gammas: Option<Vec<f64>>,
    /// Largest `|z^k|` over `k = 0..=N`.
    pub max_z_norm: f64,
    /// Largest stacked `|u^k|` over `k = 0..=N`.
    pub max_u_norm: f64,
    /// Largest `|J_mu|_F` per level with an inner argument.
    pub max_ju_norm: Vec<f64>,
    pub clamp_events: usize,
    pub iterations: u64,
}

impl RunRecord {
    pub fn new(levels: usize, seed: u64, replication: u64) -> Self {
        Self {
            levels,
            seed,
            replication,
            rows: Vec::new(),
            final_state: None,
            final_eta: 0.0,
            final_d_norm_sq: 0.0,
            gammas: None,
            max_z_norm: 0.0,
            max_u_norm: 0.0,
            max_ju_norm: vec![0.0; levels.saturating_sub(1)],
            clamp_events: 0,
            iterations: 0,
        }
    }

    pub fn observe_state(&mut self, s: &IterateState) {
        self.max_z_norm = self.max_z_norm.max(s.z.norm());
        self.max_u_norm = self.max_u_norm.max(s.u_norm());
    }

    pub fn observe_trace(&mut self, t: &IterationTrace) {
        for (m, v) in self.max_ju_norm.iter_mut().zip(&t.ju_norms) {
            *m = m.max(*v);
        }
        self.clamp_events += t.clamp_events;
        self.iterations += 1;
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["k", "tau", "d_norm_sq", "eta", "measure_sq", "measure_mixed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=self.levels).map(|m| format!("t_{m}")));
        h.extend((1..=self.levels).map(|m| format!("res_{m}")));
        h.extend(["f1", "lyap_w", "lyap_ws"].iter().map(|s| s.to_string()));
        h
    }

    /// Write the per-iteration rows as CSV (header + one line per iteration).
    /// Cells that were not computed are left empty.
    pub fn write_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.csv_header())?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.k.to_string(),
                r.tau.to_string(),
                r.d_norm_sq.to_string(),
                r.eta.to_string(),
                opt(r.measure(MeasureMode::Squared)),
                opt(r.measure(MeasureMode::Mixed)),
            ];
            for cols in [&r.tracking, &r.exact_residuals] {
                match cols {
                    Some(v) => rec.extend(v.iter().map(|x| x.to_string())),
                    None => rec.extend(std::iter::repeat_n(String::new(), self.levels)),
                }
            }
            rec.push(opt(r.f1));
            rec.push(opt(r.lyapunov));
            rec.push(opt(r.lyapunov_smooth));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Spread `max - min` of the sampled `F_1(x^k)` over the last 10% of the
    /// run.
    pub fn f1_tail_oscillation(&self) -> Option<f64> {
        let cutoff = self.iterations - self.iterations / 10;
        let tail: Vec<f64> = self.rows.iter().filter(|r| r.k >= cutoff).filter_map(|r| r.f1).collect();
        if tail.is_empty() {
            return None;
        }
        let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    }
}

/// `|f_m(x, u_{m+1}) - u_m|` for every level, via the exact evaluators.
pub fn tracking_errors(problem: &CompositionProblem, x: &Vector, u: &[Vector]) -> Result<Vec<f64>, ModelError> {
    let m_levels = problem.levels();
    (1..=m_levels)
        .map(|m| {
            let inner = if m < m_levels { Some(&u[m]) } else { None };
            Ok((problem.exact_level_value(m, x, inner)? - &u[m - 1]).norm())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureMode {
    /// `|d|^2 + sum_{m >= 2} t_m^2`
    Squared,
    /// `|d|^2 + sum_{m >= 2} t_m`
    Mixed,
}

/// Optimality measure from `|d|^2` and the tracking errors `t_1..t_M`
/// (only levels `2..=M` enter).
pub fn measure_value(d_norm_sq: f64, tracking: &[f64], mode: MeasureMode) -> f64 {
    let inner = tracking.iter().skip(1);
    d_norm_sq
        + match mode {
            MeasureMode::Squared => inner.map(|t| t * t).sum::<f64>(),
            MeasureMode::Mixed => inner.sum::<f64>(),
        }
}

/// Per-iteration optimality measure of a recorded run.
pub fn optimality_measure(record: &RunRecord, mode: MeasureMode) -> Result<Vec<f64>, DiagnosticsError> {
    record.rows.iter().map(|r| r.measure(mode).ok_or(DiagnosticsError::MissingTracking)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RandomIterate {
    /// Uniform index `R` in `0..N`.
    pub index: usize,
    pub value: f64,
    /// Mean over all `k`, i.e. the expectation over `R`.
    pub mean: f64,
}

pub fn random_iterate_measure(series: &[f64], rng: &mut StreamRng) -> Result<RandomIterate, DiagnosticsError> {
    if series.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let index = rng.random_range(0..series.len());
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    Ok(RandomIterate { index, value: series[index], mean })
}

/// Default Lyapunov weights `gamma_m = a L^{m-1} + 1`, `m = 2..=M`.
pub fn default_gammas(a: f64, l_hat: f64, levels: usize) -> Vec<f64> {
    (2..=levels).map(|m| a * l_hat.powi(m as i32 - 1) + 1.0).collect()
}

fn weighted_residuals(
    problem: &CompositionProblem,
    state: &IterateState,
    gammas: &[f64],
    squared: bool,
) -> Result<f64, ModelError> {
    let m_levels = problem.levels();
    if gammas.len() != m_levels - 1 {
        return Err(ModelError::Dimension(format!(
            "expected {} Lyapunov weights, got {}",
            m_levels - 1,
            gammas.len()
        )));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0)) {
        return Err(ModelError::InvalidParam(format!("Lyapunov weights must be positive, got {g}")));
    }
    let t = tracking_errors(problem, &state.x, &state.u)?;
    Ok(gammas.iter().zip(&t[1..]).map(|(g, t)| g * if squared { t * t } else { *t }).sum())
}

/// `W = a f_1(x, u_2) - eta(x, z) + sum_{m >= 2} gamma_m |f_m(x, u_{m+1}) - u_m|`
pub fn lyapunov_nonsmooth(
    problem: &CompositionProblem,
    state: &IterateState,
    a: f64,
    rho: f64,
    gammas: &[f64],
) -> Result<f64, ModelError> {
    let inner = state.u.get(1);
    let f1 = problem.exact_level_value(1, &state.x, inner)?[0];
    let eta = gap(&problem.feasible_set, &state.x, &state.z, rho)?.eta;
    Ok(a * f1 - eta + weighted_residuals(problem, state, gammas, false)?)
}

/// Smooth variant: `a F_1(x) - eta(x, z) + sum_{m >= 2} gamma_m |f_m(x, u_{m+1}) - u_m|^2`
pub fn lyapunov_smooth(
    problem: &CompositionProblem,
    state: &IterateState,
    a: f64,
    rho: f64,
    gammas: &[f64],
) -> Result<f64, ModelError> {
    let f1 = problem.exact_nested_values(&state.x)?[0][0];
    let eta = gap(&problem.feasible_set, &state.x, &state.z, rho)?.eta;
    Ok(a * f1 - eta + weighted_residuals(problem, state, gammas, true)?)
}

/// Least-squares slope of `log(measure)` against `log(N)`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<f64, DiagnosticsError> {
    if points.len() < 3 {
        return Err(DiagnosticsError::TooFewPoints(points.len()));
    }
    if let Some(&(n, value)) = points.iter().find(|(n, v)| !(*v > 0.0) || !(*n > 0.0)) {
        return Err(DiagnosticsError::NonPositive { n, value });
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if hi / lo < 100.0 * (1.0 - 1e-12) {
        return Err(DiagnosticsError::NarrowSpan(hi / lo));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Squared tracking errors of one replication: at the start and at the
/// (random) reporting iterate, one entry per level.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationTracking {
    pub initial_sq: Vec<f64>,
    pub reported_sq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonTracking {
    pub horizon: usize,
    pub replications: Vec<ReplicationTracking>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelTrackingReport {
    pub level: usize,
    pub horizons: Vec<usize>,
    pub mean_initial_sq: Vec<f64>,
    pub mean_reported_sq: Vec<f64>,
    /// Least-squares `C` in `mean - (2 / (b sqrt N)) t0^2 ~ C / sqrt N`.
    pub fitted_constant: f64,
    /// Every horizon satisfies the bound with twice the fitted constant.
    pub within_bound: bool,
    pub non_increasing: bool,
}

/// Compare each level's replication-averaged squared tracking error with
/// `(2 / (b sqrt N)) t0^2 + C / sqrt N`, fitting `C` across horizons.
pub fn tracking_error_bound_check(data: &[HorizonTracking], b: f64) -> Result<Vec<LevelTrackingReport>, DiagnosticsError> {
    let first = data.first().ok_or(DiagnosticsError::Empty)?;
    if let Some(h) = data.iter().find(|h| h.replications.len() < 10) {
        return Err(DiagnosticsError::InsufficientReplications(h.replications.len()));
    }
    let levels = first.replications[0].initial_sq.len();
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| xs.sum::<f64>() / n as f64;
    let mut out = Vec::with_capacity(levels);
    for m in 0..levels {
        let horizons: Vec<usize> = data.iter().map(|h| h.horizon).collect();
        let init: Vec<f64> = data
            .iter()
            .map(|h| mean(&mut h.replications.iter().map(|r| r.initial_sq[m]), h.replications.len()))
            .collect();
        let rep: Vec<f64> = data
            .iter()
            .map(|h| mean(&mut h.replications.iter().map(|r| r.reported_sq[m]), h.replications.len()))
            .collect();
        let inv_sqrt: Vec<f64> = horizons.iter().map(|n| 1.0 / (*n as f64).sqrt()).collect();
        let resid: Vec<f64> = (0..data.len()).map(|i| rep[i] - 2.0 / b * inv_sqrt[i] * init[i]).collect();
        let c = resid.iter().zip(&inv_sqrt).map(|(r, s)| r * s).sum::<f64>()
            / inv_sqrt.iter().map(|s| s * s).sum::<f64>();
        let c_pos = c.max(0.0);
        let within_bound = resid.iter().zip(&inv_sqrt).all(|(r, s)| *r <= 2.0 * c_pos * s + 1e-12);
        let non_increasing = rep.windows(2).all(|w| w[1] <= w[0]);
        out.push(LevelTrackingReport {
            level: m + 1,
            horizons,
            mean_initial_sq: init,
            mean_reported_sq: rep,
            fitted_constant: c,
            within_bound,
            non_increasing,
        });
    }
    Ok(out)
}

/// Upper bounds for `|z^k|` and the stacked `|u^k|` derived from the
/// problem: twice the largest exact subgradient / nested value norm over
/// sampled feasible points, plus ten times the RMS oracle error, plus one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateBounds {
    pub z: f64,
    pub u: f64,
}

pub fn derive_state_bounds(problem: &CompositionProblem, points: usize, seed: u64) -> Result<StateBounds, ModelError> {
    let m_levels = problem.levels();
    let mut point_rng = stream(seed, 0, 0, u64::MAX);
    let (mut g_max, mut f_max) = (0.0f64, 0.0f64);
    let (mut g_err, mut f_err) = (0.0f64, 0.0f64);
    for i in 0..points {
        let x = problem.feasible_set.sample_point(&mut point_rng);
        let values = problem.exact_nested_values(&x)?;
        let g = problem.exact_gradient(&x)?;
        g_max = g_max.max(g.norm());
        f_max = f_max.max(values.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt());
        let mut samples: Vec<OracleSample> = Vec::with_capacity(m_levels);
        for m in 1..=m_levels {
            let inner = values.get(m);
            let mut rng = stream(seed, 1, m as u64, i as u64);
            let s = sample_level(problem.oracles[m - 1].as_ref(), &x, inner, 0, &mut rng)
                .map_err(|source| ModelError::Oracle { level: m, source })?;
            samples.push(s);
        }
        let gs = assemble_subgradient(&samples)?;
        g_err += (gs - &g).norm_squared();
        f_err += samples.iter().zip(&values).map(|(s, v)| (&s.value - v).norm_squared()).sum::<f64>();
    }
    let n = points.max(1) as f64;
    Ok(StateBounds {
        z: 2.0 * g_max + 10.0 * (g_err / n).sqrt() + 1.0,
        u: 2.0 * f_max + 10.0 * (f_err / n).sqrt() + 1.0,
    })
}
