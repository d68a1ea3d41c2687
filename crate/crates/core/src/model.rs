//! Problem, state and parameter types shared by the rest of the crate.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

use crate::feasible::{FeasibleSet, SetError};
use crate::oracle::{sample_level, ExactLevel, LevelOracle, OracleError, OracleSample};
use crate::rng::{stream, Streams};
use crate::solver::assemble_subgradient;
use crate::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("custom stepsize sequence exhausted at iteration {0}")]
    ScheduleExhausted(u64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("the objective level must be scalar (d_1 = 1), found d_1 = {0}")]
    ScalarObjectiveRequired(usize),
    #[error("problem has no exact evaluators")]
    MissingExact,
    #[error(transparent)]
    Set(#[from] SetError),
    #[error("level {level}: {source}")]
    Oracle { level: usize, source: OracleError },
}

/// True level functions, a fixed Jacobian selection per level, and known
/// solution data when available.
#[derive(Clone)]
pub struct ExactEvaluators {
    pub levels: Vec<Arc<dyn ExactLevel>>,
    pub solution: Option<Vector>,
    pub optimal_value: Option<f64>,
}

/// The M-level problem `min_{x in X} f_1(x, f_2(x, ... f_M(x)))`.
///
/// Levels are stored in order `1..=M` at indices `0..M`.
#[derive(Clone)]
pub struct CompositionProblem {
    pub name: String,
    pub n: usize,
    pub level_dims: Vec<usize>,
    pub feasible_set: FeasibleSet,
    pub oracles: Vec<Arc<dyn LevelOracle>>,
    pub exact: Option<ExactEvaluators>,
}

impl fmt::Debug for CompositionProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompositionProblem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("level_dims", &self.level_dims)
            .field("feasible_set", &self.feasible_set)
            .field("has_exact", &self.exact.is_some())
            .finish()
    }
}

impl CompositionProblem {
    pub fn levels(&self) -> usize {
        self.level_dims.len()
    }

    /// Dimension `d_{m+1}` of the inner argument of level `m` (1-based);
    /// `None` for the bottom level.
    pub fn inner_dim(&self, m: usize) -> Option<usize> {
        self.level_dims.get(m).copied()
    }

    pub fn exact(&self) -> Result<&ExactEvaluators, ModelError> {
        self.exact.as_ref().ok_or(ModelError::MissingExact)
    }

    /// Exact `f_m(x, u_next)` for level `m` (1-based).
    pub fn exact_level_value(&self, m: usize, x: &Vector, u_next: Option<&Vector>) -> Result<Vector, ModelError> {
        self.exact()?.levels[m - 1]
            .value(x, u_next)
            .map_err(|source| ModelError::Oracle { level: m, source })
    }

    pub fn exact_level_jacobian(&self, m: usize, x: &Vector, u_next: Option<&Vector>) -> Result<Matrix, ModelError> {
        self.exact()?.levels[m - 1]
            .jacobian(x, u_next)
            .map_err(|source| ModelError::Oracle { level: m, source })
    }

    /// Nested values `F_1(x), ..., F_M(x)`, computed bottom-up.
    pub fn exact_nested_values(&self, x: &Vector) -> Result<Vec<Vector>, ModelError> {
        let m_levels = self.levels();
        let mut values: Vec<Vector> = vec![Vector::zeros(0); m_levels];
        for m in (1..=m_levels).rev() {
            let inner = if m < m_levels { Some(&values[m]) } else { None };
            values[m - 1] = self.exact_level_value(m, x, inner)?;
        }
        Ok(values)
    }

    /// Exact chain-rule (sub)gradient `G_1(x)` as a `d_1 x n` matrix, using
    /// the exact Jacobian selections at `(x, F_{m+1}(x))`.
    pub fn exact_gradient(&self, x: &Vector) -> Result<Matrix, ModelError> {
        let values = self.exact_nested_values(x)?;
        let m_levels = self.levels();
        let samples = (1..=m_levels)
            .map(|m| {
                let inner = if m < m_levels { Some(&values[m]) } else { None };
                let jac = self.exact_level_jacobian(m, x, inner)?;
                Ok(OracleSample::new(values[m - 1].clone(), jac, self.n))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        assemble_subgradient(&samples)
    }

    /// A feasible point used to probe oracle shapes.
    pub fn probe_point(&self) -> Result<Vector, SetError> {
        self.feasible_set.project(&Vector::zeros(self.n))
    }
}

/// A structural defect found by [`validate_problem`]. Levels are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum Violation {
    NoLevels,
    ZeroDimension { level: usize },
    OracleCount { expected: usize, actual: usize },
    ExactLevelCount { expected: usize, actual: usize },
    SetDimension { expected: usize, actual: usize },
    InvalidSet { message: String },
    ValueMismatch { level: usize, expected: usize, actual: usize },
    RowMismatch { level: usize, expected: usize, actual: usize },
    ColumnMismatch { level: usize, expected: usize, actual: usize },
    ProbeFailed { level: usize, message: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoLevels => write!(f, "problem has no levels"),
            Violation::ZeroDimension { level: 0 } => write!(f, "decision dimension n is zero"),
            Violation::ZeroDimension { level } => write!(f, "level {level} has output dimension zero"),
            Violation::OracleCount { expected, actual } => {
                write!(f, "expected {expected} level oracles, found {actual}")
            }
            Violation::ExactLevelCount { expected, actual } => {
                write!(f, "expected {expected} exact evaluators, found {actual}")
            }
            Violation::SetDimension { expected, actual } => {
                write!(f, "feasible set has dimension {actual}, expected {expected}")
            }
            Violation::InvalidSet { message } => write!(f, "{message}"),
            Violation::ValueMismatch { level, expected, actual } => {
                write!(f, "level {level}: value has dimension {actual}, expected {expected}")
            }
            Violation::RowMismatch { level, expected, actual } => {
                write!(f, "level {level}: Jacobian has {actual} rows, expected {expected}")
            }
            Violation::ColumnMismatch { level, expected, actual } => {
                write!(f, "level {level}: Jacobian has {actual} columns, expected {expected}")
            }
            Violation::ProbeFailed { level, message } => write!(f, "level {level}: probe failed: {message}"),
        }
    }
}

/// Check every dimension invariant of `problem`. Each oracle (and exact
/// evaluator, when present) is probed once at a feasible point with a zero
/// inner argument, using a fixed stream, so the result is reproducible.
pub fn validate_problem(problem: &CompositionProblem) -> Vec<Violation> {
    let mut out = Vec::new();
    let m_levels = problem.levels();
    if m_levels == 0 {
        out.push(Violation::NoLevels);
        return out;
    }
    if problem.n == 0 {
        out.push(Violation::ZeroDimension { level: 0 });
    }
    for (i, d) in problem.level_dims.iter().enumerate() {
        if *d == 0 {
            out.push(Violation::ZeroDimension { level: i + 1 });
        }
    }
    if problem.oracles.len() != m_levels {
        out.push(Violation::OracleCount { expected: m_levels, actual: problem.oracles.len() });
    }
    if let Some(exact) = &problem.exact {
        if exact.levels.len() != m_levels {
            out.push(Violation::ExactLevelCount { expected: m_levels, actual: exact.levels.len() });
        }
    }
    if problem.feasible_set.dim() != problem.n {
        out.push(Violation::SetDimension { expected: problem.n, actual: problem.feasible_set.dim() });
    }
    if let Err(e) = problem.feasible_set.validate() {
        out.push(Violation::InvalidSet { message: e.to_string() });
    }
    if !out.is_empty() {
        return out;
    }
    let x = match problem.probe_point() {
        Ok(x) => x,
        Err(e) => {
            out.push(Violation::InvalidSet { message: e.to_string() });
            return out;
        }
    };
    for m in 1..=m_levels {
        let d = problem.level_dims[m - 1];
        let inner = problem.inner_dim(m).map(Vector::zeros);
        let cols = problem.n + inner.as_ref().map_or(0, |u| u.len());
        let mut rng = stream(0, 0, m as u64, 0);
        match problem.oracles[m - 1].sample(&x, inner.as_ref(), 0, &mut rng) {
            Ok(s) => check_shapes(&mut out, m, d, cols, s.value.len(), s.jacobian.nrows(), s.jacobian.ncols()),
            Err(e) => out.push(Violation::ProbeFailed { level: m, message: e.to_string() }),
        }
        if let Some(exact) = &problem.exact {
            let level = &exact.levels[m - 1];
            match (level.value(&x, inner.as_ref()), level.jacobian(&x, inner.as_ref())) {
                (Ok(v), Ok(j)) => {
                    let mut found = Vec::new();
                    check_shapes(&mut found, m, d, cols, v.len(), j.nrows(), j.ncols());
                    for f in found {
                        if !out.contains(&f) {
                            out.push(f);
                        }
                    }
                }
                (Err(e), _) | (_, Err(e)) => {
                    out.push(Violation::ProbeFailed { level: m, message: format!("exact evaluator: {e}") })
                }
            }
        }
    }
    out
}

fn check_shapes(out: &mut Vec<Violation>, level: usize, d: usize, cols: usize, value: usize, rows: usize, ncols: usize) {
    if value != d {
        out.push(Violation::ValueMismatch { level, expected: d, actual: value });
    }
    if rows != d {
        out.push(Violation::RowMismatch { level, expected: d, actual: rows });
    }
    if ncols != cols {
        out.push(Violation::ColumnMismatch { level, expected: cols, actual: ncols });
    }
}

/// Full state of the method: decision `x`, averaged subgradient `z` and one
/// tracker per level (`u[m - 1]` tracks level `m`).
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub k: u64,
    pub x: Vector,
    pub z: Vector,
    pub u: Vec<Vector>,
}

impl IterateState {
    pub fn is_finite(&self) -> bool {
        let fin = |v: &Vector| v.iter().all(|c| c.is_finite());
        fin(&self.x) && fin(&self.z) && self.u.iter().all(fin)
    }

    /// Euclidean norm of the stacked trackers.
    pub fn u_norm(&self) -> f64 {
        self.u.iter().map(|u| u.norm_squared()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    /// `tau0 / (k + 1)^gamma`
    Diminishing { tau0: f64, gamma: f64 },
    Constant { tau: f64 },
    Custom { steps: Vec<f64> },
}

impl StepSchedule {
    /// Schedule value before clipping.
    pub fn raw(&self, k: u64) -> Result<f64, ModelError> {
        match self {
            StepSchedule::Diminishing { tau0, gamma } => Ok(tau0 / ((k as f64) + 1.0).powf(*gamma)),
            StepSchedule::Constant { tau } => Ok(*tau),
            StepSchedule::Custom { steps } => {
                usize::try_from(k).ok().and_then(|i| steps.get(i)).copied().ok_or(ModelError::ScheduleExhausted(k))
            }
        }
    }

    /// Divergent sum and square-summable, i.e. usable for unbounded horizons.
    pub fn is_square_summable_divergent(&self) -> bool {
        matches!(self, StepSchedule::Diminishing { gamma, .. } if *gamma > 0.5 && *gamma <= 1.0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidParam(m));
        match self {
            StepSchedule::Diminishing { tau0, gamma } => {
                if !(*tau0 > 0.0 && tau0.is_finite()) {
                    return bad(format!("schedule.tau0 must be positive, got {tau0}"));
                }
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return bad(format!("schedule.gamma must be positive, got {gamma}"));
                }
            }
            StepSchedule::Constant { tau } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return bad(format!("schedule.tau must be positive, got {tau}"));
                }
            }
            StepSchedule::Custom { steps } => {
                if steps.is_empty() {
                    return bad("schedule.steps must be non-empty".into());
                }
                if let Some(i) = steps.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
                    return bad(format!("schedule.steps[{i}] must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmParams {
    /// Averaging gain of `z`.
    pub a: f64,
    /// Averaging gain of the trackers.
    pub b: f64,
    /// Subproblem regularization.
    pub rho: f64,
    pub schedule: StepSchedule,
    #[serde(default)]
    pub seed: u64,
}

impl AlgorithmParams {
    pub fn new(a: f64, b: f64, rho: f64, schedule: StepSchedule, seed: u64) -> Self {
        Self { a, b, rho, schedule, seed }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("a", self.a), ("b", self.b), ("rho", self.rho)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        self.schedule.validate()
    }

    /// Largest admissible stepsize, `min(1, 1/a, 1/b)`.
    pub fn step_cap(&self) -> f64 {
        1f64.min(1.0 / self.a).min(1.0 / self.b)
    }

    pub fn stepsize(&self, k: u64) -> Result<f64, ModelError> {
        next_stepsize(&self.schedule, k, self.a, self.b)
    }
}

/// `tau_k` from `schedule`, clipped into `(0, min(1, 1/a, 1/b)]`.
pub fn next_stepsize(schedule: &StepSchedule, k: u64, a: f64, b: f64) -> Result<f64, ModelError> {
    let raw = schedule.raw(k)?;
    if !(raw > 0.0) {
        return Err(ModelError::InvalidParam(format!("non-positive stepsize {raw} at iteration {k}")));
    }
    Ok(raw.min(1.0).min(1.0 / a).min(1.0 / b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Zeros,
    /// One oracle draw at `x0`: trackers take the sampled values (bottom-up)
    /// and `z` the assembled subgradient.
    #[default]
    OneSample,
}

/// Initial state at `Proj_X(init_x)`. `OneSample` draws from counter 0 of
/// the replication's streams.
pub fn init_state(
    problem: &CompositionProblem,
    params: &AlgorithmParams,
    init_x: &Vector,
    policy: InitPolicy,
    replication: u64,
) -> Result<IterateState, ModelError> {
    if init_x.len() != problem.n {
        return Err(ModelError::Dimension(format!(
            "initial point has dimension {}, problem has n = {}",
            init_x.len(),
            problem.n
        )));
    }
    let x = problem.feasible_set.project(init_x)?;
    let m_levels = problem.levels();
    match policy {
        InitPolicy::Zeros => Ok(IterateState {
            k: 0,
            z: Vector::zeros(problem.n),
            u: problem.level_dims.iter().map(|d| Vector::zeros(*d)).collect(),
            x,
        }),
        InitPolicy::OneSample => {
            if problem.level_dims[0] != 1 {
                return Err(ModelError::ScalarObjectiveRequired(problem.level_dims[0]));
            }
            let streams = Streams::new(params.seed, replication);
            let mut samples: Vec<Option<OracleSample>> = vec![None; m_levels];
            for m in (1..=m_levels).rev() {
                let inner = samples.get(m).and_then(|s| s.as_ref()).map(|s| &s.value);
                let mut rng = streams.level(m, 0);
                let s = sample_level(problem.oracles[m - 1].as_ref(), &x, inner, 0, &mut rng)
                    .map_err(|source| ModelError::Oracle { level: m, source })?;
                samples[m - 1] = Some(s);
            }
            let samples: Vec<OracleSample> = samples.into_iter().flatten().collect();
            let g = assemble_subgradient(&samples)?;
            Ok(IterateState {
                k: 0,
                z: g.row(0).transpose(),
                u: samples.into_iter().map(|s| s.value).collect(),
                x,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::NoisyLevel;
    use crate::oracle::NoiseModel;

    /// `f(x) = sum x_i^2` as a single level.
    struct SumSquares;

    impl ExactLevel for SumSquares {
        fn value(&self, x: &Vector, _: Option<&Vector>) -> Result<Vector, OracleError> {
            Ok(Vector::from_element(1, x.norm_squared()))
        }
        fn jacobian(&self, x: &Vector, _: Option<&Vector>) -> Result<Matrix, OracleError> {
            Ok(Matrix::from_row_slice(1, x.len(), (x * 2.0).as_slice()))
        }
    }

    /// Oracle with a fixed output shape, for dimension checks.
    struct Shaped {
        rows: usize,
        cols: usize,
    }

    impl LevelOracle for Shaped {
        fn sample(&self, x: &Vector, _: Option<&Vector>, _: u64, _: &mut crate::rng::StreamRng) -> Result<OracleSample, OracleError> {
            Ok(OracleSample::new(Vector::zeros(self.rows), Matrix::zeros(self.rows, self.cols), x.len()))
        }
    }

    fn single_level(n: usize, set: FeasibleSet) -> CompositionProblem {
        let exact: Arc<dyn ExactLevel> = Arc::new(SumSquares);
        CompositionProblem {
            name: "sum_squares".into(),
            n,
            level_dims: vec![1],
            feasible_set: set,
            oracles: vec![Arc::new(NoisyLevel::new(exact.clone(), NoiseModel::default(), n))],
            exact: Some(ExactEvaluators { levels: vec![exact], solution: None, optimal_value: None }),
        }
    }

    fn params() -> AlgorithmParams {
        AlgorithmParams::new(1.0, 1.0, 1.0, StepSchedule::Constant { tau: 0.5 }, 1)
    }

    #[test]
    fn minimal_problem_is_valid() {
        let p = single_level(3, FeasibleSet::cube(3, -1.0, 1.0));
        assert!(validate_problem(&p).is_empty());
        assert_eq!(validate_problem(&p), validate_problem(&p));
    }

    #[test]
    fn column_mismatch_names_the_level() {
        let n = 4;
        let p = CompositionProblem {
            name: "bad".into(),
            n,
            level_dims: vec![1, 3],
            feasible_set: FeasibleSet::cube(n, 0.0, 1.0),
            oracles: vec![Arc::new(Shaped { rows: 1, cols: n + 2 }), Arc::new(Shaped { rows: 3, cols: n })],
            exact: None,
        };
        assert_eq!(
            validate_problem(&p),
            vec![Violation::ColumnMismatch { level: 1, expected: n + 3, actual: n + 2 }]
        );
    }

    #[test]
    fn structural_violations_are_reported() {
        let mut p = single_level(2, FeasibleSet::cube(3, 0.0, 1.0));
        p.oracles.push(Arc::new(Shaped { rows: 1, cols: 2 }));
        let v = validate_problem(&p);
        assert!(v.contains(&Violation::OracleCount { expected: 1, actual: 2 }));
        assert!(v.contains(&Violation::SetDimension { expected: 2, actual: 3 }));
    }

    #[test]
    fn zeros_policy() {
        let p = single_level(2, FeasibleSet::cube(2, -1.0, 1.0));
        let s = init_state(&p, &params(), &Vector::from_element(2, 0.5), InitPolicy::Zeros, 0).unwrap();
        assert_eq!(s.z, Vector::zeros(2));
        assert_eq!(s.u, vec![Vector::zeros(1)]);
        assert_eq!(s.k, 0);
    }

    #[test]
    fn one_sample_policy_uses_the_derivative() {
        let p = single_level(1, FeasibleSet::cube(1, -10.0, 10.0));
        let x0 = Vector::from_element(1, 3.0);
        let s = init_state(&p, &params(), &x0, InitPolicy::OneSample, 0).unwrap();
        let fd = crate::oracle::finite_difference_reference(|x, _| x.map(|v| v * v), &x0, None, 1e-5);
        assert!((s.z[0] - 6.0).abs() < 1e-12);
        assert!((s.z[0] - fd[(0, 0)]).abs() < 1e-8);
        assert_eq!(s.u[0][0], 9.0);
    }

    #[test]
    fn initial_point_is_projected() {
        let p = single_level(3, FeasibleSet::cube(3, 0.0, 1.0));
        let s = init_state(&p, &params(), &Vector::from_element(3, 2.0), InitPolicy::Zeros, 0).unwrap();
        assert_eq!(s.x, Vector::from_element(3, 1.0));
        let err = init_state(&p, &params(), &Vector::zeros(2), InitPolicy::Zeros, 0).unwrap_err();
        assert!(matches!(err, ModelError::Dimension(_)));
    }

    #[test]
    fn stepsize_examples() {
        let dim = StepSchedule::Diminishing { tau0: 1.0, gamma: 1.0 };
        assert_eq!(next_stepsize(&dim, 0, 1.0, 1.0).unwrap(), 1.0);
        assert!((next_stepsize(&dim, 9, 1.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(next_stepsize(&StepSchedule::Constant { tau: 0.7 }, 0, 2.0, 1.0).unwrap(), 0.5);
        assert_eq!(next_stepsize(&StepSchedule::Constant { tau: 0.7 }, 0, 1.0, 4.0).unwrap(), 0.25);
        let custom = StepSchedule::Custom { steps: vec![0.5, 0.25] };
        assert_eq!(next_stepsize(&custom, 1, 1.0, 1.0).unwrap(), 0.25);
        assert_eq!(next_stepsize(&custom, 2, 1.0, 1.0), Err(ModelError::ScheduleExhausted(2)));
    }

    #[test]
    fn harmonic_schedule_sums_diverge_and_squares_converge() {
        // with gamma = 1 the partial sums pass 100 only after ~e^100 terms
        let slow = StepSchedule::Diminishing { tau0: 1.0, gamma: 0.6 };
        assert!(slow.is_square_summable_divergent());
        let mut sum = 0.0;
        let mut k = 0;
        while sum <= 100.0 {
            sum += next_stepsize(&slow, k, 1.0, 1.0).unwrap();
            k += 1;
            assert!(k < 100_000_000, "partial sums do not exceed 100");
        }
        let dim = StepSchedule::Diminishing { tau0: 1.0, gamma: 1.0 };
        assert!(dim.is_square_summable_divergent());
        let n = 1_000_000u64;
        let mut sq = 0.0;
        let mut prev = 0.0;
        for k in 0..=n {
            let t = next_stepsize(&dim, k, 1.0, 1.0).unwrap();
            sq += t * t;
            assert!(sq >= prev);
            prev = sq;
        }
        let limit = std::f64::consts::PI.powi(2) / 6.0;
        // tail sum_{j > n+1} 1/j^2 <= 1/(n+1)
        let tail = limit - sq;
        assert!(tail >= 0.0 && tail <= 1.0 / (n as f64 + 1.0) + 1e-12, "tail {tail}");
        assert!(tail < 1e-6 + 1e-12);
    }

    #[test]
    fn params_validation() {
        let mut p = params();
        assert!(p.validate().is_ok());
        p.rho = 0.0;
        assert!(matches!(p.validate(), Err(ModelError::InvalidParam(m)) if m.contains("rho")));
        let p = AlgorithmParams::new(1.0, 1.0, 1.0, StepSchedule::Custom { steps: vec![] }, 0);
        assert!(p.validate().is_err());
    }
}
