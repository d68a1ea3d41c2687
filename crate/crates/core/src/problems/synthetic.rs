//! Smooth synthetic compositions with a known minimizer.
//!
//! Levels `2..=M` are affine, `f_m(x, u) = Q_m x + R_m u + c_m` (the bottom
//! level has no `R_M u` term), and the top level is the strongly convex
//! quadratic `f_1(x, u) = |x - x_hat|^2 / 2 + |u - u_hat|^2 / 2`. The nested
//! inner map is affine, `F_2(x) = A x + c`, so
//! `F_1(x) = |x - x_hat|^2 / 2 + |A x + c - u_hat|^2 / 2`, whose unique
//! minimizer is placed inside the box by choosing
//! `x_hat = x* + A^T (A x* + c - u_hat)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::ProblemError;
use crate::feasible::FeasibleSet;
use crate::model::{CompositionProblem, ExactEvaluators};
use crate::oracle::{ExactLevel, LevelOracle, NoiseModel, NoisyLevel, OracleError};
use crate::rng::{stream, StreamRng};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub levels: usize,
    /// Output dimension of levels `2..=M`.
    #[serde(default = "default_inner_dim")]
    pub inner_dim: usize,
    #[serde(default)]
    pub instance_seed: u64,
    /// Feasible set is `[-box_radius, box_radius]^n`.
    #[serde(default = "default_box_radius")]
    pub box_radius: f64,
    #[serde(default)]
    pub noise: NoiseModel,
}

fn default_inner_dim() -> usize {
    3
}

fn default_box_radius() -> f64 {
    2.0
}

impl SyntheticSpec {
    pub fn new(n: usize, levels: usize) -> Self {
        Self {
            n,
            levels,
            inner_dim: default_inner_dim(),
            instance_seed: 0,
            box_radius: default_box_radius(),
            noise: NoiseModel::default(),
        }
    }
}

/// `f(x, u) = |x - x_hat|^2 / 2 + |u - u_hat|^2 / 2`; `u` is absent when
/// this is the only level.
#[derive(Debug, Clone)]
pub struct QuadraticTop {
    pub x_hat: Vector,
    pub u_hat: Option<Vector>,
}

impl ExactLevel for QuadraticTop {
    fn value(&self, x: &Vector, u: Option<&Vector>) -> Result<Vector, OracleError> {
        let mut v = 0.5 * (x - &self.x_hat).norm_squared();
        match (u, &self.u_hat) {
            (Some(u), Some(h)) => {
                check_inner(u, h.len())?;
                v += 0.5 * (u - h).norm_squared();
            }
            (None, None) => {}
            (None, Some(_)) => return Err(OracleError::MissingInner(1)),
            (Some(_), None) => return Err(OracleError::UnexpectedInner(1)),
        }
        Ok(Vector::from_element(1, v))
    }

    fn jacobian(&self, x: &Vector, u: Option<&Vector>) -> Result<Matrix, OracleError> {
        let gx = x - &self.x_hat;
        let gu = match (u, &self.u_hat) {
            (Some(u), Some(h)) => {
                check_inner(u, h.len())?;
                u - h
            }
            (None, None) => Vector::zeros(0),
            (None, Some(_)) => return Err(OracleError::MissingInner(1)),
            (Some(_), None) => return Err(OracleError::UnexpectedInner(1)),
        };
        let mut j = Matrix::zeros(1, gx.len() + gu.len());
        j.row_mut(0).columns_mut(0, gx.len()).copy_from(&gx.transpose());
        j.row_mut(0).columns_mut(gx.len(), gu.len()).copy_from(&gu.transpose());
        Ok(j)
    }
}

/// `f(x, u) = Q x + R u + c`, or `Q x + c` when `r` is `None`.
#[derive(Debug, Clone)]
pub struct AffineLevel {
    pub q: Matrix,
    pub r: Option<Matrix>,
    pub c: Vector,
}

impl ExactLevel for AffineLevel {
    fn value(&self, x: &Vector, u: Option<&Vector>) -> Result<Vector, OracleError> {
        let mut v = &self.q * x + &self.c;
        match (u, &self.r) {
            (Some(u), Some(r)) => {
                check_inner(u, r.ncols())?;
                v += r * u;
            }
            (None, None) => {}
            (None, Some(_)) => return Err(OracleError::MissingInner(0)),
            (Some(_), None) => return Err(OracleError::UnexpectedInner(0)),
        }
        Ok(v)
    }

    fn jacobian(&self, _x: &Vector, u: Option<&Vector>) -> Result<Matrix, OracleError> {
        match (u, &self.r) {
            (Some(u), Some(r)) => {
                check_inner(u, r.ncols())?;
                let mut j = Matrix::zeros(self.q.nrows(), self.q.ncols() + r.ncols());
                j.columns_mut(0, self.q.ncols()).copy_from(&self.q);
                j.columns_mut(self.q.ncols(), r.ncols()).copy_from(r);
                Ok(j)
            }
            (None, None) => Ok(self.q.clone()),
            (None, Some(_)) => Err(OracleError::MissingInner(0)),
            (Some(_), None) => Err(OracleError::UnexpectedInner(0)),
        }
    }
}

pub(crate) fn check_inner(u: &Vector, expected: usize) -> Result<(), OracleError> {
    if u.len() != expected {
        return Err(OracleError::InnerDimension { expected, actual: u.len() });
    }
    Ok(())
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut StreamRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn gaussian_vector(len: usize, scale: f64, rng: &mut StreamRng) -> Vector {
    Vector::from_fn(len, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// A generated instance with its known minimizer.
#[derive(Debug, Clone)]
pub struct SyntheticSmooth {
    pub spec: SyntheticSpec,
    pub top: QuadraticTop,
    /// Levels `2..=M`.
    pub inner: Vec<AffineLevel>,
    pub solution: Vector,
    pub optimal_value: f64,
}

impl SyntheticSmooth {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self, ProblemError> {
        let bad = |m: &str| Err(ProblemError::InvalidParam(m.to_string()));
        if spec.n == 0 {
            return bad("n must be positive");
        }
        if spec.levels == 0 {
            return bad("levels must be at least 1");
        }
        if spec.levels > 1 && spec.inner_dim == 0 {
            return bad("inner_dim must be positive");
        }
        if !(spec.box_radius > 0.0 && spec.box_radius.is_finite()) {
            return bad("box_radius must be positive");
        }
        spec.noise.validate().map_err(ProblemError::InvalidParam)?;
        let (n, m_levels, d) = (spec.n, spec.levels, spec.inner_dim);
        let mut rng = stream(spec.instance_seed, 0, 0, 0);

        let mut inner = Vec::with_capacity(m_levels.saturating_sub(1));
        for m in 2..=m_levels {
            let q = gaussian_matrix(d, n, 1.0 / (n as f64).sqrt(), &mut rng);
            let r = (m < m_levels).then(|| gaussian_matrix(d, d, 0.5 / (d as f64).sqrt(), &mut rng));
            let c = gaussian_vector(d, 1.0, &mut rng);
            inner.push(AffineLevel { q, r, c });
        }
        let solution = Vector::from_fn(n, |_, _| rng.random_range(-0.5..=0.5) * spec.box_radius);

        let top = if m_levels == 1 {
            QuadraticTop { x_hat: solution.clone(), u_hat: None }
        } else {
            // compose the affine inner levels bottom-up: F_2(x) = A x + c
            let bottom = inner.last().expect("at least one inner level");
            let (mut a, mut c) = (bottom.q.clone(), bottom.c.clone());
            for level in inner.iter().rev().skip(1) {
                let r = level.r.as_ref().expect("middle levels have an inner block");
                a = &level.q + r * a;
                c = r * c + &level.c;
            }
            let u_hat = gaussian_vector(d, 1.0, &mut rng);
            let x_hat = &solution + a.transpose() * (&a * &solution + &c - &u_hat);
            QuadraticTop { x_hat, u_hat: Some(u_hat) }
        };
        let mut inst = Self { spec: spec.clone(), top, inner, solution, optimal_value: 0.0 };
        inst.optimal_value = inst.objective(&inst.solution)?;
        Ok(inst)
    }

    fn exact_levels(&self) -> Vec<Arc<dyn ExactLevel>> {
        let mut levels: Vec<Arc<dyn ExactLevel>> = vec![Arc::new(self.top.clone())];
        levels.extend(self.inner.iter().map(|l| Arc::new(l.clone()) as Arc<dyn ExactLevel>));
        levels
    }

    /// `F_1(x)` by direct nesting.
    pub fn objective(&self, x: &Vector) -> Result<f64, ProblemError> {
        let mut u: Option<Vector> = None;
        for level in self.inner.iter().rev() {
            u = Some(level.value(x, u.as_ref()).map_err(|e| ProblemError::InvalidParam(e.to_string()))?);
        }
        Ok(self.top.value(x, u.as_ref()).map_err(|e| ProblemError::InvalidParam(e.to_string()))?[0])
    }

    pub fn into_problem(self) -> CompositionProblem {
        let n = self.spec.n;
        let exact = self.exact_levels();
        let oracles: Vec<Arc<dyn LevelOracle>> = exact
            .iter()
            .map(|e| Arc::new(NoisyLevel::new(e.clone(), self.spec.noise, n)) as Arc<dyn LevelOracle>)
            .collect();
        let mut level_dims = vec![1];
        level_dims.extend(std::iter::repeat_n(self.spec.inner_dim, self.spec.levels - 1));
        CompositionProblem {
            name: "synthetic_smooth".into(),
            n,
            level_dims,
            feasible_set: FeasibleSet::cube(n, -self.spec.box_radius, self.spec.box_radius),
            oracles,
            exact: Some(ExactEvaluators {
                levels: exact,
                solution: Some(self.solution),
                optimal_value: Some(self.optimal_value),
            }),
        }
    }
}
