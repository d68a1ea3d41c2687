//! Stochastic level oracles.
//!
//! A level oracle returns one joint estimate `(h, J)` of the level value and
//! of one element of its generalized Jacobian at `(x, u_next)`. The value and
//! Jacobian of a level always come from the same draw; different levels are
//! given different random streams by the caller (see [`crate::rng`]), which
//! is what makes the `u`-block error of level `m` independent of all errors
//! of the levels below it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

use crate::rng::StreamRng;
use crate::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("evaluation outside the oracle domain: {0}")]
    Domain(String),
    #[error("oracle produced a non-finite {0}")]
    NonFinite(&'static str),
    #[error("level expects an inner value of dimension {expected}, got {actual}")]
    InnerDimension { expected: usize, actual: usize },
    #[error("level {0} takes no inner value")]
    UnexpectedInner(usize),
    #[error("level {0} requires an inner value")]
    MissingInner(usize),
}

/// One draw `(h, J)` from a level oracle.
///
/// `jacobian` has `n + d_{m+1}` columns for inner levels and `n` for the
/// bottom level; the first `x_cols` columns form the `x`-block.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    pub value: Vector,
    pub jacobian: Matrix,
    pub x_cols: usize,
    /// Set when the oracle had to clamp an argument into its domain.
    pub clamped: bool,
}

impl OracleSample {
    pub fn new(value: Vector, jacobian: Matrix, x_cols: usize) -> Self {
        Self { value, jacobian, x_cols, clamped: false }
    }

    pub fn x_block(&self) -> Matrix {
        self.jacobian.columns(0, self.x_cols).into_owned()
    }

    /// The `u`-block; it has zero columns for the bottom level.
    pub fn u_block(&self) -> Matrix {
        let cols = self.jacobian.ncols() - self.x_cols;
        self.jacobian.columns(self.x_cols, cols).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite()) && self.jacobian.iter().all(|v| v.is_finite())
    }
}

/// The stochastic oracle of one level.
pub trait LevelOracle: Send + Sync {
    /// Draw one estimate at `(x, u_next)`. `k` is the index of the iteration
    /// requesting the sample (it only matters for bias schedules).
    fn sample(
        &self,
        x: &Vector,
        u_next: Option<&Vector>,
        k: u64,
        rng: &mut StreamRng,
    ) -> Result<OracleSample, OracleError>;
}

/// Exact evaluator of one level: the true `f_m` and a fixed selection from
/// its generalized Jacobian.
pub trait ExactLevel: Send + Sync {
    fn value(&self, x: &Vector, u_next: Option<&Vector>) -> Result<Vector, OracleError>;
    fn jacobian(&self, x: &Vector, u_next: Option<&Vector>) -> Result<Matrix, OracleError>;
}

/// Draw from `oracle` and reject non-finite output.
pub fn sample_level(
    oracle: &dyn LevelOracle,
    x: &Vector,
    u_next: Option<&Vector>,
    k: u64,
    rng: &mut StreamRng,
) -> Result<OracleSample, OracleError> {
    let s = oracle.sample(x, u_next, k, rng)?;
    if !s.value.iter().all(|v| v.is_finite()) {
        return Err(OracleError::NonFinite("value"));
    }
    if !s.jacobian.iter().all(|v| v.is_finite()) {
        return Err(OracleError::NonFinite("jacobian"));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt(3) sd, sqrt(3) sd]`.
    Uniform,
    /// `+sd` or `-sd` with equal probability.
    Rademacher,
}

impl NoiseDistribution {
    /// Centered draw with standard deviation `sd`.
    pub fn draw(self, sd: f64, rng: &mut StreamRng) -> f64 {
        if sd == 0.0 {
            return 0.0;
        }
        match self {
            NoiseDistribution::Gaussian => {
                let e: f64 = rng.sample(StandardNormal);
                sd * e
            }
            NoiseDistribution::Uniform => {
                let half = 3f64.sqrt() * sd;
                rng.random_range(-half..=half)
            }
            NoiseDistribution::Rademacher => {
                if rng.random::<bool>() {
                    sd
                } else {
                    -sd
                }
            }
        }
    }
}

/// Deterministic vanishing bias `delta(k) = scale / (k + 1)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSchedule {
    pub scale: f64,
    #[serde(default = "one")]
    pub exponent: f64,
}

fn one() -> f64 {
    1.0
}

impl BiasSchedule {
    pub fn at(&self, k: u64) -> f64 {
        self.scale / ((k as f64) + 1.0).powf(self.exponent)
    }
}

/// Additive noise and bias applied on top of an exact level.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(default)]
    pub value_noise_sd: f64,
    #[serde(default)]
    pub jac_noise_sd: f64,
    #[serde(default)]
    pub distribution: NoiseDistribution,
    #[serde(default)]
    pub bias_decay: Option<BiasSchedule>,
}

impl NoiseModel {
    pub fn gaussian(value_noise_sd: f64, jac_noise_sd: f64) -> Self {
        Self { value_noise_sd, jac_noise_sd, ..Self::default() }
    }

    pub fn is_deterministic(&self) -> bool {
        self.value_noise_sd == 0.0 && self.jac_noise_sd == 0.0 && self.bias_decay.is_none()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.value_noise_sd >= 0.0 && self.value_noise_sd.is_finite()) {
            return Err("value_noise_sd must be a finite non-negative number".into());
        }
        if !(self.jac_noise_sd >= 0.0 && self.jac_noise_sd.is_finite()) {
            return Err("jac_noise_sd must be a finite non-negative number".into());
        }
        Ok(())
    }

    /// Perturb an exact `(value, jacobian)` pair in place. Value entries are
    /// drawn first, then Jacobian entries in column-major order.
    pub fn perturb(&self, value: &mut Vector, jacobian: &mut Matrix, k: u64, rng: &mut StreamRng) {
        let bias = self.bias_decay.map_or(0.0, |b| b.at(k));
        for v in value.iter_mut() {
            *v += self.distribution.draw(self.value_noise_sd, rng) + bias;
        }
        for j in jacobian.iter_mut() {
            *j += self.distribution.draw(self.jac_noise_sd, rng) + bias;
        }
    }
}

/// Oracle that evaluates an exact level and adds noise per [`NoiseModel`].
/// With the default (zero) noise model it is deterministic.
pub struct NoisyLevel {
    pub exact: Arc<dyn ExactLevel>,
    pub noise: NoiseModel,
    pub n: usize,
}

impl NoisyLevel {
    pub fn new(exact: Arc<dyn ExactLevel>, noise: NoiseModel, n: usize) -> Self {
        Self { exact, noise, n }
    }
}

impl fmt::Debug for NoisyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoisyLevel").field("noise", &self.noise).field("n", &self.n).finish()
    }
}

impl LevelOracle for NoisyLevel {
    fn sample(
        &self,
        x: &Vector,
        u_next: Option<&Vector>,
        k: u64,
        rng: &mut StreamRng,
    ) -> Result<OracleSample, OracleError> {
        let mut value = self.exact.value(x, u_next)?;
        let mut jacobian = self.exact.jacobian(x, u_next)?;
        self.noise.perturb(&mut value, &mut jacobian, k, rng);
        Ok(OracleSample::new(value, jacobian, self.n))
    }
}

/// Central-difference Jacobian of `f` at `(x, u_next)`, with columns ordered
/// as `[x-block | u-block]`.
pub fn finite_difference_reference<F>(f: F, x: &Vector, u_next: Option<&Vector>, h: f64) -> Matrix
where
    F: Fn(&Vector, Option<&Vector>) -> Vector,
{
    let base = f(x, u_next);
    let n = x.len();
    let du = u_next.map_or(0, |u| u.len());
    let mut jac = Matrix::zeros(base.len(), n + du);
    for i in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (f(&xp, u_next) - f(&xm, u_next)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    if let Some(u) = u_next {
        for j in 0..du {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let col = (f(x, Some(&up)) - f(x, Some(&um))) / (2.0 * h);
            jac.set_column(n + j, &col);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    struct Linear {
        a: Matrix,
    }

    impl ExactLevel for Linear {
        fn value(&self, x: &Vector, _u: Option<&Vector>) -> Result<Vector, OracleError> {
            Ok(&self.a * x)
        }
        fn jacobian(&self, _x: &Vector, _u: Option<&Vector>) -> Result<Matrix, OracleError> {
            Ok(self.a.clone())
        }
    }

    struct Shift {
        c: f64,
    }

    impl ExactLevel for Shift {
        fn value(&self, x: &Vector, u: Option<&Vector>) -> Result<Vector, OracleError> {
            Ok(Vector::from_element(1, x.sum() + u.map_or(0.0, |u| u.sum()) + self.c))
        }
        fn jacobian(&self, x: &Vector, u: Option<&Vector>) -> Result<Matrix, OracleError> {
            Ok(Matrix::from_element(1, x.len() + u.map_or(0, |u| u.len()), 1.0))
        }
    }

    fn linear_oracle(noise: NoiseModel) -> NoisyLevel {
        let a = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
        NoisyLevel::new(Arc::new(Linear { a }), noise, 3)
    }

    #[test]
    fn deterministic_linear_oracle_is_exact() {
        let o = linear_oracle(NoiseModel::default());
        let x = Vector::from_vec(vec![1.0, -1.0, 2.0]);
        let s = o.sample(&x, None, 0, &mut stream(0, 0, 1, 1)).unwrap();
        assert_eq!(s.value, Vector::from_vec(vec![-1.0, 4.5]));
        assert_eq!(s.jacobian, Matrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]));
        let again = o.sample(&x, None, 0, &mut stream(9, 9, 9, 9)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn gaussian_value_noise_is_unbiased() {
        let sd = 0.1;
        let o = linear_oracle(NoiseModel::gaussian(sd, 0.0));
        let x = Vector::from_vec(vec![1.0, -1.0, 2.0]);
        let n = 100_000;
        let mut mean = Vector::zeros(2);
        for i in 0..n {
            mean += o.sample(&x, None, 0, &mut stream(7, 0, 1, i)).unwrap().value;
        }
        mean /= n as f64;
        let exact = Vector::from_vec(vec![-1.0, 4.5]);
        let bound = 3.0 * sd / (n as f64).sqrt();
        for i in 0..2 {
            assert!((mean[i] - exact[i]).abs() <= bound, "entry {i}: {}", mean[i]);
        }
    }

    #[test]
    fn every_distribution_has_the_requested_spread() {
        for dist in [NoiseDistribution::Gaussian, NoiseDistribution::Uniform, NoiseDistribution::Rademacher] {
            let mut rng = stream(3, 0, 1, 0);
            let n = 50_000;
            let draws: Vec<f64> = (0..n).map(|_| dist.draw(0.5, &mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 * 0.5 / (n as f64).sqrt(), "{dist:?} mean {mean}");
            assert!((var.sqrt() - 0.5).abs() < 0.01, "{dist:?} sd {}", var.sqrt());
        }
    }

    #[test]
    fn bias_schedule_offsets_values_and_jacobians() {
        let noise = NoiseModel {
            bias_decay: Some(BiasSchedule { scale: 1.0, exponent: 1.0 }),
            ..NoiseModel::default()
        };
        let o = NoisyLevel::new(Arc::new(Shift { c: 0.0 }), noise, 2);
        let x = Vector::from_vec(vec![0.5, 0.25]);
        let s0 = o.sample(&x, None, 0, &mut stream(0, 0, 1, 1)).unwrap();
        assert_eq!(s0.value[0], 0.75 + 1.0);
        assert_eq!(s0.jacobian[(0, 0)], 2.0);
        let s999 = o.sample(&x, None, 999, &mut stream(0, 0, 1, 1)).unwrap();
        assert!((s999.value[0] - (0.75 + 1e-3)).abs() < 1e-15);
        assert!((s999.jacobian[(0, 1)] - (1.0 + 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn block_split_reassembles() {
        let j = Matrix::from_row_slice(2, 5, &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]);
        let s = OracleSample::new(Vector::zeros(2), j.clone(), 3);
        let (xb, ub) = (s.x_block(), s.u_block());
        assert_eq!((xb.ncols(), ub.ncols()), (3, 2));
        let mut joined = Matrix::zeros(2, 5);
        joined.columns_mut(0, 3).copy_from(&xb);
        joined.columns_mut(3, 2).copy_from(&ub);
        assert_eq!(joined, j);
        let bottom = OracleSample::new(Vector::zeros(2), Matrix::zeros(2, 3), 3);
        assert_eq!(bottom.u_block().ncols(), 0);
    }

    #[test]
    fn sample_level_rejects_non_finite() {
        struct Bad;
        impl LevelOracle for Bad {
            fn sample(&self, x: &Vector, _: Option<&Vector>, _: u64, _: &mut StreamRng) -> Result<OracleSample, OracleError> {
                Ok(OracleSample::new(Vector::from_element(1, f64::NAN), Matrix::zeros(1, x.len()), x.len()))
            }
        }
        let err = sample_level(&Bad, &Vector::zeros(2), None, 0, &mut stream(0, 0, 0, 0)).unwrap_err();
        assert_eq!(err, OracleError::NonFinite("value"));
    }

    #[test]
    fn finite_difference_of_square() {
        let x = Vector::from_element(1, 3.0);
        let j = finite_difference_reference(|x, _| x.map(|v| v * v), &x, None, 1e-5);
        assert!((j[(0, 0)] - 6.0).abs() <= 1e-9);
    }

    #[test]
    fn finite_difference_of_identity_in_u() {
        let x = Vector::from_vec(vec![0.3, -2.0]);
        let u = Vector::from_vec(vec![1.0, 4.0, -1.0]);
        let j = finite_difference_reference(|_, u| u.unwrap().clone(), &x, Some(&u), 1e-4);
        let s = OracleSample::new(Vector::zeros(3), j, 2);
        assert!(s.x_block().iter().all(|v| v.abs() < 1e-12));
        assert!((s.u_block() - Matrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn finite_difference_of_constant_is_zero() {
        let x = Vector::from_vec(vec![1.0, 2.0]);
        let j = finite_difference_reference(|_, _| Vector::from_vec(vec![5.0, -1.0]), &x, None, 1e-3);
        assert_eq!(j, Matrix::zeros(2, 2));
    }
}
