//! Stochastic variational inequality through the regularized gap function.
//!
//! For an affine operator `T(x) = A x + b` we look for `x in X` with
//! `<T(x), xi - x> >= 0` for all `xi in X`. The inner level observes
//! `H(x) = -(A x + b)` with noise, and the top level is
//!
//! ```text
//! f_1(x, u) = max_{y in X} <u, y - x> - r/2 |y - x|^2
//! ```
//!
//! whose maximizer is `y = Proj_X(x + u / r)`. At `u = H(x)` the value is
//! non-negative and vanishes exactly at solutions of the inequality.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::synthetic::{check_inner, gaussian_matrix, gaussian_vector};
use super::ProblemError;
use crate::feasible::FeasibleSet;
use crate::model::{CompositionProblem, ExactEvaluators};
use crate::oracle::{ExactLevel, LevelOracle, NoiseModel, NoisyLevel, OracleError, OracleSample};
use crate::rng::stream;
use crate::{Matrix, Vector};

/// Explicit operator `T(x) = A x + b`; `a` is given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineOperator {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SviSpec {
    pub n: usize,
    /// When absent, `A = I + skew` (or an indefinite matrix if `monotone` is
    /// false) and `b` are generated from `instance_seed`.
    #[serde(default)]
    pub operator: Option<AffineOperator>,
    #[serde(default = "default_skew_scale")]
    pub skew_scale: f64,
    #[serde(default)]
    pub instance_seed: u64,
    #[serde(default = "default_r")]
    pub r: f64,
    /// Defaults to `[-1, 1]^n`.
    #[serde(default)]
    pub set: Option<FeasibleSet>,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_monotone")]
    pub monotone: bool,
}

fn default_skew_scale() -> f64 {
    0.5
}

fn default_r() -> f64 {
    1.0
}

fn default_monotone() -> bool {
    true
}

impl SviSpec {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            operator: None,
            skew_scale: default_skew_scale(),
            instance_seed: 0,
            r: default_r(),
            set: None,
            noise: NoiseModel::default(),
            monotone: true,
        }
    }
}

/// Top level: the regularized gap function over `set`.
#[derive(Debug, Clone)]
pub struct GapTop {
    pub set: FeasibleSet,
    pub r: f64,
}

impl GapTop {
    /// Value and gradient; the maximizer is unique, so the gradient is
    /// `(-u + r (y - x), y - x)`.
    pub fn evaluate(&self, x: &Vector, u: &Vector) -> Result<OracleSample, OracleError> {
        check_inner(u, x.len())?;
        let y = self
            .set
            .project(&(x + u / self.r))
            .map_err(|e| OracleError::Domain(e.to_string()))?;
        let d = &y - x;
        let value = u.dot(&d) - 0.5 * self.r * d.norm_squared();
        let n = x.len();
        let mut j = Matrix::zeros(1, 2 * n);
        j.row_mut(0).columns_mut(0, n).copy_from(&(-u + &d * self.r).transpose());
        j.row_mut(0).columns_mut(n, n).copy_from(&d.transpose());
        Ok(OracleSample::new(Vector::from_element(1, value), j, n))
    }
}

impl ExactLevel for GapTop {
    fn value(&self, x: &Vector, u: Option<&Vector>) -> Result<Vector, OracleError> {
        Ok(self.evaluate(x, u.ok_or(OracleError::MissingInner(1))?)?.value)
    }

    fn jacobian(&self, x: &Vector, u: Option<&Vector>) -> Result<Matrix, OracleError> {
        Ok(self.evaluate(x, u.ok_or(OracleError::MissingInner(1))?)?.jacobian)
    }
}

/// Inner level `H(x) = -(A x + b)`.
#[derive(Debug, Clone)]
pub struct NegatedOperator {
    pub a: Matrix,
    pub b: Vector,
}

impl ExactLevel for NegatedOperator {
    fn value(&self, x: &Vector, u: Option<&Vector>) -> Result<Vector, OracleError> {
        if u.is_some() {
            return Err(OracleError::UnexpectedInner(2));
        }
        Ok(-(&self.a * x + &self.b))
    }

    fn jacobian(&self, _x: &Vector, u: Option<&Vector>) -> Result<Matrix, OracleError> {
        if u.is_some() {
            return Err(OracleError::UnexpectedInner(2));
        }
        Ok(-&self.a)
    }
}

/// Noise-free level-1 sample of the gap function at `(x, u)`.
pub fn svi_gap_oracle(set: &FeasibleSet, r: f64, x: &Vector, u: &Vector) -> Result<OracleSample, OracleError> {
    GapTop { set: set.clone(), r }.evaluate(x, u)
}

/// Solve `<A x + b, xi - x> >= 0` over `set` by the projected iteration
/// `x <- Proj(x - g (A x + b))`, which contracts when the symmetric part of
/// `A` is positive definite. Returns `None` if it does not settle to `tol`.
pub fn solve_monotone_vi(a: &Matrix, b: &Vector, set: &FeasibleSet, tol: f64) -> Option<Vector> {
    let sym = (a + a.transpose()) * 0.5;
    let mu = sym.symmetric_eigenvalues().min();
    let l = a.clone().singular_values().max();
    if !(mu > 0.0) || !(l > 0.0) {
        return None;
    }
    let g = mu / (l * l);
    let mut x = set.project(&Vector::zeros(b.len())).ok()?;
    for _ in 0..10_000_000 {
        let next = set.project(&(&x - (a * &x + b) * g)).ok()?;
        let moved = (&next - &x).norm();
        x = next;
        if moved <= tol * g {
            return Some(x);
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct SviInstance {
    pub a: Matrix,
    pub b: Vector,
    pub r: f64,
    pub set: FeasibleSet,
    pub noise: NoiseModel,
    pub solution: Option<Vector>,
}

impl SviInstance {
    pub fn generate(spec: &SviSpec) -> Result<Self, ProblemError> {
        let bad = |m: String| Err(ProblemError::InvalidParam(m));
        let n = spec.n;
        if n == 0 {
            return bad("n must be positive".into());
        }
        if !(spec.r > 0.0 && spec.r.is_finite()) {
            return bad(format!("r must be positive, got {}", spec.r));
        }
        spec.noise.validate().map_err(ProblemError::InvalidParam)?;
        let set = spec.set.clone().unwrap_or_else(|| FeasibleSet::cube(n, -1.0, 1.0));
        set.validate().map_err(|e| ProblemError::InvalidParam(e.to_string()))?;
        if set.dim() != n {
            return bad(format!("set dimension {} differs from n = {n}", set.dim()));
        }
        let (a, b) = match &spec.operator {
            Some(op) => {
                if op.a.len() != n || op.a.iter().any(|row| row.len() != n) || op.b.len() != n {
                    return bad(format!("operator must be {n} x {n} with an offset of length {n}"));
                }
                let a = Matrix::from_fn(n, n, |i, j| op.a[i][j]);
                (a, Vector::from_column_slice(&op.b))
            }
            None => {
                let mut rng = stream(spec.instance_seed, 0, 0, 2);
                let g = gaussian_matrix(n, n, 1.0, &mut rng);
                let a = if spec.monotone {
                    Matrix::identity(n, n) + (&g - g.transpose()) * (spec.skew_scale / (2.0 * n as f64).sqrt())
                } else {
                    g / (n as f64).sqrt()
                };
                (a, gaussian_vector(n, 0.5, &mut rng))
            }
        };
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return bad("operator entries must be finite".into());
        }
        let solution = if spec.monotone { solve_monotone_vi(&a, &b, &set, 1e-12) } else { None };
        Ok(Self { a, b, r: spec.r, set, noise: spec.noise, solution })
    }

    pub fn into_problem(self) -> CompositionProblem {
        let n = self.b.len();
        let top: Arc<dyn ExactLevel> = Arc::new(GapTop { set: self.set.clone(), r: self.r });
        let inner: Arc<dyn ExactLevel> = Arc::new(NegatedOperator { a: self.a, b: self.b });
        let oracles: Vec<Arc<dyn LevelOracle>> = vec![
            Arc::new(NoisyLevel::new(top.clone(), NoiseModel::default(), n)),
            Arc::new(NoisyLevel::new(inner.clone(), self.noise, n)),
        ];
        CompositionProblem {
            name: "svi".into(),
            n,
            level_dims: vec![1, n],
            feasible_set: self.set,
            oracles,
            exact: Some(ExactEvaluators {
                levels: vec![top, inner],
                optimal_value: self.solution.as_ref().map(|_| 0.0),
                solution: self.solution,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feasible::gap;
    use crate::model::validate_problem;
    use crate::oracle::finite_difference_reference;
    use rand::Rng;

    fn identity_instance(n: usize) -> SviSpec {
        let mut s = SviSpec::new(n);
        s.operator = Some(AffineOperator {
            a: (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
            b: vec![-1.0; n],
        });
        s.set = Some(FeasibleSet::cube(n, 0.0, 2.0));
        s
    }

    #[test]
    fn zero_direction_gives_zero_gap() {
        let set = FeasibleSet::cube(3, -1.0, 1.0);
        let x = Vector::from_vec(vec![0.5, -1.0, 1.0]);
        let s = svi_gap_oracle(&set, 2.0, &x, &Vector::zeros(3)).unwrap();
        assert_eq!(s.value[0], 0.0);
        assert_eq!(s.jacobian.amax(), 0.0);
    }

    #[test]
    fn interior_closed_form_and_grid_search() {
        let set = FeasibleSet::cube(2, -1.0, 1.0);
        let r = 2.0;
        let x = Vector::from_vec(vec![0.1, -0.2]);
        let u = Vector::from_vec(vec![0.3, 0.4]);
        let s = svi_gap_oracle(&set, r, &x, &u).unwrap();
        assert!((s.value[0] - u.norm_squared() / (2.0 * r)).abs() < 1e-15);
        let mut best = f64::NEG_INFINITY;
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=steps {
                let y = Vector::from_vec(vec![-1.0 + 2.0 * i as f64 / steps as f64, -1.0 + 2.0 * j as f64 / steps as f64]);
                let d = &y - &x;
                best = best.max(u.dot(&d) - 0.5 * r * d.norm_squared());
            }
        }
        assert!(best <= s.value[0] + 1e-15 && s.value[0] - best < 1e-4);
    }

    #[test]
    fn gap_gradient_matches_finite_differences() {
        let set = FeasibleSet::cube(4, -1.0, 1.0);
        let top = GapTop { set: set.clone(), r: 1.5 };
        let mut rng = stream(6, 0, 0, 0);
        for _ in 0..100 {
            let x = set.sample_point(&mut rng);
            let u = Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let j = top.jacobian(&x, Some(&u)).unwrap();
            let fd = finite_difference_reference(|x, u| top.value(x, u).unwrap(), &x, Some(&u), 1e-6);
            assert!((j - fd).amax() < 1e-5);
        }
    }

    #[test]
    fn identity_operator_has_unit_solution() {
        let inst = SviInstance::generate(&identity_instance(4)).unwrap();
        let x = inst.solution.clone().unwrap();
        assert!((x - Vector::from_element(4, 1.0)).amax() < 1e-10);
    }

    #[test]
    fn solution_is_stationary_for_composed_problem() {
        for seed in 0..5 {
            let mut spec = SviSpec::new(6);
            spec.instance_seed = seed;
            let inst = SviInstance::generate(&spec).unwrap();
            let p = inst.into_problem();
            assert!(validate_problem(&p).is_empty());
            let x = p.exact().unwrap().solution.clone().unwrap();
            let f = p.exact_nested_values(&x).unwrap();
            assert!(f[0][0].abs() < 1e-9, "gap value {}", f[0][0]);
            let g1 = p.exact_gradient(&x).unwrap().row(0).transpose();
            let eta = gap(&p.feasible_set, &x, &g1, 1.0).unwrap().eta;
            assert!(eta.abs() < 1e-8, "eta {eta}");
        }
    }

    #[test]
    fn solution_satisfies_inequality_on_samples() {
        let inst = SviInstance::generate(&SviSpec::new(5)).unwrap();
        let x = inst.solution.clone().unwrap();
        let t = &inst.a * &x + &inst.b;
        let mut rng = stream(2, 0, 0, 0);
        for _ in 0..1000 {
            let xi = inst.set.sample_point(&mut rng);
            assert!(t.dot(&(xi - &x)) >= -1e-9);
        }
    }

    #[test]
    fn non_monotone_instance_has_no_reference_solution() {
        let mut spec = SviSpec::new(3);
        spec.monotone = false;
        let p = SviInstance::generate(&spec).unwrap().into_problem();
        assert!(p.exact().unwrap().solution.is_none());
        assert!(validate_problem(&p).is_empty());
    }

    #[test]
    fn invalid_parameters() {
        let mut s = SviSpec::new(3);
        s.r = 0.0;
        assert!(SviInstance::generate(&s).is_err());
        let mut s = identity_instance(3);
        s.operator.as_mut().unwrap().b.pop();
        assert!(SviInstance::generate(&s).is_err());
    }
}
