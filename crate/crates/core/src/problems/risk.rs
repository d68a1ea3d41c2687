//! Mean-semideviation risk minimization as a nested composition.
//!
//! For a random loss `Z = H(x)` the risk is
//! `E[Z] + kappa (E[max(0, Z - E[Z])^p])^(1/p)`.
//!
//! - `p = 1`: `f_1(x, u) = E[H + kappa max(0, H - u)]`, `f_2(x) = E[H]`
//! - `p = 2`: `f_1(x, u) = E[H] + kappa sqrt(eps + u)`,
//!   `f_2(x, u) = E[max(0, H - u)^2]`, `f_3(x) = E[H]`
//!
//! Scenario losses are affine, `H_s(x) = <a_s, x> + b_s`, optionally passed
//! through `max(0, .)`. The subgradient of `max(0, t)` at `t = 0` is taken
//! as 0.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::ProblemError;
use crate::feasible::FeasibleSet;
use crate::model::{CompositionProblem, ExactEvaluators};
use crate::oracle::{ExactLevel, LevelOracle, OracleError, OracleSample};
use crate::rng::{stream, StreamRng};
use crate::{Matrix, Vector};

/// Finite scenario distribution: `weights[s]` (normalized), `a[s]`, `b[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub weights: Vec<f64>,
    pub a: Vec<Vector>,
    pub b: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ScenarioSet {
    pub fn new(weights: Vec<f64>, a: Vec<Vector>, b: Vec<f64>) -> Result<Self, ProblemError> {
        let bad = |m: String| Err(ProblemError::InvalidParam(m));
        if weights.is_empty() {
            return bad("scenario set is empty".into());
        }
        if a.len() != weights.len() || b.len() != weights.len() {
            return bad("scenario columns have different lengths".into());
        }
        let n = a[0].len();
        if n == 0 || a.iter().any(|v| v.len() != n) {
            return bad("scenario loss vectors must share a positive dimension".into());
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("scenario weights must be finite and non-negative".into());
        }
        if a.iter().flat_map(|v| v.iter()).chain(&b).any(|v| !v.is_finite()) {
            return bad("scenario data must be finite".into());
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return bad("scenario weights sum to zero".into());
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { weights, a, b, cumulative })
    }

    /// Equally weighted synthetic asset losses. Asset `i` has mean loss
    /// `1 - 0.4 i/(n-1)` and spread `0.1 + 0.6 i/(n-1)`, with one common
    /// factor, so lower expected loss comes with more dispersion.
    pub fn generate(count: usize, n: usize, seed: u64) -> Result<Self, ProblemError> {
        if count == 0 || n == 0 {
            return Err(ProblemError::InvalidParam("scenario count and n must be positive".into()));
        }
        let mut rng = stream(seed, 0, 0, 1);
        let frac = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let mut a = Vec::with_capacity(count);
        for _ in 0..count {
            let factor: f64 = rng.sample(StandardNormal);
            a.push(Vector::from_fn(n, |i, _| {
                let own: f64 = rng.sample(StandardNormal);
                (1.0 - 0.4 * frac(i)) + (0.1 + 0.6 * frac(i)) * (0.6 * factor + 0.8 * own)
            }));
        }
        Self::new(vec![1.0; count], a, vec![0.0; count])
    }

    /// Reads `weight, a_1, ..., a_n, b` rows; the first row is a header and
    /// lines starting with `#` are skipped.
    pub fn from_csv_reader<R: io::Read>(reader: R) -> Result<Self, ProblemError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let (mut weights, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ProblemError::Io(e.to_string()))?;
            let vals = rec
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| ProblemError::InvalidParam(format!("scenario row {}: {e}", i + 1)))?;
            if vals.len() < 3 {
                return Err(ProblemError::InvalidParam(format!(
                    "scenario row {} needs weight, at least one loss coefficient and an offset",
                    i + 1
                )));
            }
            weights.push(vals[0]);
            a.push(Vector::from_column_slice(&vals[1..vals.len() - 1]));
            b.push(vals[vals.len() - 1]);
        }
        Self::new(weights, a, b)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, ProblemError> {
        let f = std::fs::File::open(path).map_err(|e| ProblemError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(f)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.a[0].len()
    }

    pub fn draw_index(&self, rng: &mut StreamRng) -> usize {
        let t: f64 = rng.random();
        self.cumulative.partition_point(|c| *c <= t).min(self.len() - 1)
    }
}

/// Scenario losses with Gaussian coefficients `a_i ~ N(mean_a_i, sd_a^2)`,
/// `b ~ N(mean_b, sd_b^2)`. Sampling only; there are no exact evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScenarios {
    pub mean_a: Vec<f64>,
    pub sd_a: f64,
    #[serde(default)]
    pub mean_b: f64,
    #[serde(default)]
    pub sd_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioModel {
    Discrete(ScenarioSet),
    Gaussian(GaussianScenarios),
}

impl ScenarioModel {
    pub fn dim(&self) -> usize {
        match self {
            ScenarioModel::Discrete(s) => s.dim(),
            ScenarioModel::Gaussian(g) => g.mean_a.len(),
        }
    }

    fn draw(&self, rng: &mut StreamRng) -> (Vector, f64) {
        match self {
            ScenarioModel::Discrete(s) => {
                let i = s.draw_index(rng);
                (s.a[i].clone(), s.b[i])
            }
            ScenarioModel::Gaussian(g) => {
                let a = Vector::from_iterator(
                    g.mean_a.len(),
                    g.mean_a.iter().map(|m| m + g.sd_a * rng.sample::<f64, _>(StandardNormal)),
                );
                let b = g.mean_b + g.sd_b * rng.sample::<f64, _>(StandardNormal);
                (a, b)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskOrder {
    P1,
    P2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskLevelKind {
    /// `E[H]`
    Mean,
    /// `E[H + kappa max(0, H - u)]`
    SemideviationP1,
    /// `E[max(0, H - u)^2]`
    SquaredExcess,
    /// `E[H] + kappa sqrt(eps + u)`
    SqrtTop,
}

/// One level of a risk composition.
pub struct RiskLevel {
    pub kind: RiskLevelKind,
    pub model: Arc<ScenarioModel>,
    pub kappa: f64,
    pub epsilon: f64,
    pub relu: bool,
}

impl fmt::Debug for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RiskLevel").field("kind", &self.kind).field("kappa", &self.kappa).finish_non_exhaustive()
    }
}

/// Value and Jacobian blocks of one scenario term.
struct Term {
    value: f64,
    jx: Vector,
    ju: Option<f64>,
    clamped: bool,
}

impl RiskLevel {
    fn loss(&self, a: &Vector, b: f64, x: &Vector) -> (f64, Vector) {
        let h = a.dot(x) + b;
        if self.relu {
            if h > 0.0 {
                (h, a.clone())
            } else {
                (0.0, Vector::zeros(a.len()))
            }
        } else {
            (h, a.clone())
        }
    }

    fn inner(&self, u: Option<&Vector>) -> Result<Option<f64>, OracleError> {
        match (self.kind, u) {
            (RiskLevelKind::Mean, None) => Ok(None),
            (RiskLevelKind::Mean, Some(_)) => Err(OracleError::UnexpectedInner(0)),
            (_, Some(u)) if u.len() == 1 => Ok(Some(u[0])),
            (_, Some(u)) => Err(OracleError::InnerDimension { expected: 1, actual: u.len() }),
            (_, None) => Err(OracleError::MissingInner(0)),
        }
    }

    fn term(&self, a: &Vector, b: f64, x: &Vector, u: Option<f64>) -> Term {
        let (h, grad) = self.loss(a, b, x);
        match (self.kind, u) {
            (RiskLevelKind::Mean, _) => Term { value: h, jx: grad, ju: None, clamped: false },
            (RiskLevelKind::SemideviationP1, Some(u)) => {
                let active = if h - u > 0.0 { 1.0 } else { 0.0 };
                Term {
                    value: h + self.kappa * (h - u).max(0.0),
                    jx: grad * (1.0 + self.kappa * active),
                    ju: Some(-self.kappa * active),
                    clamped: false,
                }
            }
            (RiskLevelKind::SquaredExcess, Some(u)) => {
                let e = (h - u).max(0.0);
                Term { value: e * e, jx: grad * (2.0 * e), ju: Some(-2.0 * e), clamped: false }
            }
            (RiskLevelKind::SqrtTop, Some(u)) => {
                let floor = 0.5 * self.epsilon;
                let arg = self.epsilon + u;
                let (arg, slope, clamped) = if arg < floor {
                    (floor, 0.0, true)
                } else {
                    (arg, self.kappa / (2.0 * arg.sqrt()), false)
                };
                Term { value: h + self.kappa * arg.sqrt(), jx: grad, ju: Some(slope), clamped }
            }
            (_, None) => unreachable!("inner argument checked by caller"),
        }
    }

    fn to_sample(term: Term, n: usize) -> OracleSample {
        let cols = n + usize::from(term.ju.is_some());
        let mut j = Matrix::zeros(1, cols);
        j.row_mut(0).columns_mut(0, n).copy_from(&term.jx.transpose());
        if let Some(ju) = term.ju {
            j[(0, n)] = ju;
        }
        let mut s = OracleSample::new(Vector::from_element(1, term.value), j, n);
        s.clamped = term.clamped;
        s
    }

    /// Probability-weighted sum of all scenario terms.
    fn expectation(&self, x: &Vector, u: Option<&Vector>) -> Result<OracleSample, OracleError> {
        let ScenarioModel::Discrete(set) = self.model.as_ref() else {
            return Err(OracleError::Domain("exact risk evaluation needs a finite scenario set".into()));
        };
        let u = self.inner(u)?;
        let n = x.len();
        let mut acc = Term { value: 0.0, jx: Vector::zeros(n), ju: u.map(|_| 0.0), clamped: false };
        for s in 0..set.len() {
            let t = self.term(&set.a[s], set.b[s], x, u);
            let w = set.weights[s];
            acc.value += w * t.value;
            acc.jx += t.jx * w;
            if let (Some(a), Some(v)) = (acc.ju.as_mut(), t.ju) {
                *a += w * v;
            }
            acc.clamped |= t.clamped;
        }
        Ok(Self::to_sample(acc, n))
    }
}

impl LevelOracle for RiskLevel {
    fn sample(&self, x: &Vector, u_next: Option<&Vector>, _k: u64, rng: &mut StreamRng) -> Result<OracleSample, OracleError> {
        let u = self.inner(u_next)?;
        let (a, b) = self.model.draw(rng);
        if a.len() != x.len() {
            return Err(OracleError::Domain(format!("scenario dimension {} differs from n = {}", a.len(), x.len())));
        }
        Ok(Self::to_sample(self.term(&a, b, x, u), x.len()))
    }
}

impl ExactLevel for RiskLevel {
    fn value(&self, x: &Vector, u_next: Option<&Vector>) -> Result<Vector, OracleError> {
        Ok(self.expectation(x, u_next)?.value)
    }

    fn jacobian(&self, x: &Vector, u_next: Option<&Vector>) -> Result<Matrix, OracleError> {
        Ok(self.expectation(x, u_next)?.jacobian)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSource {
    Generate {
        count: usize,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
    Gaussian(GaussianScenarios),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSpec {
    pub scenarios: ScenarioSource,
    pub kappa: f64,
    /// Only used for `p = 2`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub relu: bool,
    /// Defaults to the unit simplex.
    #[serde(default)]
    pub set: Option<FeasibleSet>,
}

fn default_epsilon() -> f64 {
    1e-4
}

/// Direct evaluation of the mean-semideviation functional on a finite
/// distribution of losses.
pub fn mean_semideviation(losses: &[f64], weights: &[f64], kappa: f64, p: f64) -> f64 {
    let mean: f64 = losses.iter().zip(weights).map(|(z, w)| w * z).sum();
    let dev: f64 = losses.iter().zip(weights).map(|(z, w)| w * (z - mean).max(0.0).powf(p)).sum();
    mean + kappa * dev.powf(1.0 / p)
}

/// Wire the levels of a risk composition over `model`.
pub fn risk_problem(
    model: ScenarioModel,
    order: RiskOrder,
    kappa: f64,
    epsilon: f64,
    relu: bool,
    set: Option<FeasibleSet>,
) -> Result<CompositionProblem, ProblemError> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(ProblemError::InvalidParam(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    if order == RiskOrder::P2 && !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ProblemError::InvalidParam(format!("epsilon must be positive, got {epsilon}")));
    }
    if let ScenarioModel::Gaussian(g) = &model {
        if g.mean_a.is_empty() || !(g.sd_a >= 0.0) || !(g.sd_b >= 0.0) {
            return Err(ProblemError::InvalidParam("gaussian scenarios need mean_a and non-negative spreads".into()));
        }
    }
    let n = model.dim();
    let set = set.unwrap_or(FeasibleSet::Simplex { dim: n, scale: 1.0 });
    let has_exact = matches!(model, ScenarioModel::Discrete(_));
    let model = Arc::new(model);
    let level = |kind| Arc::new(RiskLevel { kind, model: model.clone(), kappa, epsilon, relu });
    let levels: Vec<Arc<RiskLevel>> = match order {
        RiskOrder::P1 => vec![level(RiskLevelKind::SemideviationP1), level(RiskLevelKind::Mean)],
        RiskOrder::P2 => vec![
            level(RiskLevelKind::SqrtTop),
            level(RiskLevelKind::SquaredExcess),
            level(RiskLevelKind::Mean),
        ],
    };
    let name = match order {
        RiskOrder::P1 => "risk_p1",
        RiskOrder::P2 => "risk_p2",
    };
    Ok(CompositionProblem {
        name: name.into(),
        n,
        level_dims: vec![1; levels.len()],
        feasible_set: set,
        oracles: levels.iter().map(|l| l.clone() as Arc<dyn LevelOracle>).collect(),
        exact: has_exact.then(|| ExactEvaluators {
            levels: levels.iter().map(|l| l.clone() as Arc<dyn ExactLevel>).collect(),
            solution: None,
            optimal_value: None,
        }),
    })
}

pub fn build(spec: &RiskSpec, order: RiskOrder, base_dir: Option<&Path>) -> Result<CompositionProblem, ProblemError> {
    let model = match &spec.scenarios {
        ScenarioSource::Generate { count, n, seed } => ScenarioModel::Discrete(ScenarioSet::generate(*count, *n, *seed)?),
        ScenarioSource::Csv { path } => {
            let full = match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.clone(),
            };
            ScenarioModel::Discrete(ScenarioSet::from_csv_path(&full)?)
        }
        ScenarioSource::Gaussian(g) => ScenarioModel::Gaussian(g.clone()),
    };
    risk_problem(model, order, spec.kappa, spec.epsilon, spec.relu, spec.set.clone())
}
