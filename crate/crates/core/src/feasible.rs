//! Convex compact feasible sets, Euclidean projections, the regularized
//! linearized subproblem and the gap function.
//!
//! The subproblem
//!
//! ```text
//! y(x, z) = argmin_{y in X} <z, y - x> + rho/2 |y - x|^2
//! ```
//!
//! is the projection of `x - z / rho` onto `X`, and its optimal value is the
//! gap `eta(x, z) <= 0`.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

use crate::rng::StreamRng;
use crate::{Matrix, Vector};

/// Iterate-change tolerance for Dykstra's method.
pub const DYKSTRA_TOL: f64 = 1e-10;
/// Sweep limit for Dykstra's method.
pub const DYKSTRA_MAX_SWEEPS: usize = 10_000;
/// Relative tolerance used to declare `eta == 0`.
pub const STATIONARITY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("feasible set is empty or malformed: {0}")]
    Invalid(String),
    #[error("point has dimension {actual}, set has dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("cannot project a non-finite point")]
    NonFinite,
    #[error("polytope projection did not converge within {0} sweeps")]
    NonConvergence(usize),
}

/// Halfspace `{ y : <normal, y> <= offset }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

type ProjectionFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// User-supplied projection onto a convex compact set of dimension `dim`.
#[derive(Clone)]
pub struct CustomProjection {
    pub dim: usize,
    pub project: Arc<ProjectionFn>,
}

impl fmt::Debug for CustomProjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomProjection").field("dim", &self.dim).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeasibleSet {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// `{ y >= 0 : sum(y) = scale }`
    Simplex { dim: usize, scale: f64 },
    /// Intersection of halfspaces; `interior_point` certifies nonemptiness.
    Polytope { halfspaces: Vec<Halfspace>, interior_point: Vec<f64> },
    #[serde(skip)]
    Custom(CustomProjection),
}

impl FeasibleSet {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        FeasibleSet::Box { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeasibleSet::Box { lo, .. } => lo.len(),
            FeasibleSet::Ball { center, .. } => center.len(),
            FeasibleSet::Simplex { dim, .. } => *dim,
            FeasibleSet::Polytope { interior_point, .. } => interior_point.len(),
            FeasibleSet::Custom(c) => c.dim,
        }
    }

    pub fn validate(&self) -> Result<(), SetError> {
        let bad = |msg: String| Err(SetError::Invalid(msg));
        if self.dim() == 0 {
            return bad("dimension must be positive".into());
        }
        match self {
            FeasibleSet::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return bad(format!("box bounds have lengths {} and {}", lo.len(), hi.len()));
                }
                if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i] && lo[i].is_finite() && hi[i].is_finite())) {
                    return bad(format!("box bound {i} has lo {} > hi {} or is not finite", lo[i], hi[i]));
                }
            }
            FeasibleSet::Ball { center, radius } => {
                if !(*radius > 0.0 && radius.is_finite()) || center.iter().any(|c| !c.is_finite()) {
                    return bad(format!("ball radius {radius} must be positive and finite"));
                }
            }
            FeasibleSet::Simplex { scale, .. } => {
                if !(*scale > 0.0 && scale.is_finite()) {
                    return bad(format!("simplex scale {scale} must be positive"));
                }
            }
            FeasibleSet::Polytope { halfspaces, interior_point } => {
                let n = interior_point.len();
                for (i, h) in halfspaces.iter().enumerate() {
                    if h.normal.len() != n {
                        return bad(format!("halfspace {i} normal has dimension {}", h.normal.len()));
                    }
                    if h.normal.iter().map(|a| a * a).sum::<f64>() == 0.0 {
                        return bad(format!("halfspace {i} has a zero normal"));
                    }
                    let lhs: f64 = h.normal.iter().zip(interior_point).map(|(a, p)| a * p).sum();
                    if lhs > h.offset {
                        return bad(format!("interior point violates halfspace {i}"));
                    }
                }
            }
            FeasibleSet::Custom(_) => {}
        }
        Ok(())
    }

    /// Euclidean projection `argmin_{y in X} |y - v|`.
    pub fn project(&self, v: &Vector) -> Result<Vector, SetError> {
        if v.len() != self.dim() {
            return Err(SetError::Dimension { expected: self.dim(), actual: v.len() });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(SetError::NonFinite);
        }
        Ok(match self {
            FeasibleSet::Box { lo, hi } => Vector::from_iterator(
                v.len(),
                v.iter().zip(lo.iter().zip(hi)).map(|(c, (l, h))| c.clamp(*l, *h)),
            ),
            FeasibleSet::Ball { center, radius } => {
                let c = Vector::from_column_slice(center);
                let diff = v - &c;
                let norm = diff.norm();
                if norm <= *radius {
                    v.clone()
                } else {
                    c + diff * (*radius / norm)
                }
            }
            FeasibleSet::Simplex { scale, .. } => project_simplex(v, *scale),
            FeasibleSet::Polytope { halfspaces, interior_point } => project_polytope(v, halfspaces, interior_point)?,
            FeasibleSet::Custom(c) => (c.project)(v),
        })
    }

    /// Membership test with absolute tolerance `tol`.
    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        if x.len() != self.dim() || x.iter().any(|c| !c.is_finite()) {
            return false;
        }
        match self {
            FeasibleSet::Box { lo, hi } => {
                x.iter().zip(lo.iter().zip(hi)).all(|(c, (l, h))| *c >= l - tol && *c <= h + tol)
            }
            FeasibleSet::Ball { center, radius } => (x - Vector::from_column_slice(center)).norm() <= radius + tol,
            FeasibleSet::Simplex { scale, .. } => x.iter().all(|c| *c >= -tol) && (x.sum() - scale).abs() <= tol,
            FeasibleSet::Polytope { halfspaces, .. } => halfspaces.iter().all(|h| {
                let lhs: f64 = h.normal.iter().zip(x.iter()).map(|(a, c)| a * c).sum();
                lhs <= h.offset + tol
            }),
            FeasibleSet::Custom(_) => self.project(x).is_ok_and(|p| (p - x).norm() <= tol),
        }
    }

    /// Random point of the set, for tests and diagnostics. Box and ball
    /// points are uniform, simplex points are flat-Dirichlet, polytope points
    /// come from a short hit-and-run walk started at the interior point.
    pub fn sample_point(&self, rng: &mut StreamRng) -> Vector {
        let n = self.dim();
        match self {
            FeasibleSet::Box { lo, hi } => Vector::from_iterator(
                n,
                lo.iter().zip(hi).map(|(l, h)| if l == h { *l } else { rng.random_range(*l..=*h) }),
            ),
            FeasibleSet::Ball { center, radius } => {
                let dir = gaussian_vector(n, rng);
                let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
                Vector::from_column_slice(center) + dir.normalize() * r
            }
            FeasibleSet::Simplex { scale, .. } => {
                let e = Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(Exp1)));
                let s = e.sum();
                e * (*scale / s)
            }
            FeasibleSet::Polytope { halfspaces, interior_point } => {
                let mut p = Vector::from_column_slice(interior_point);
                for _ in 0..25 {
                    let d = gaussian_vector(n, rng).normalize();
                    let (mut t_lo, mut t_hi) = (-1e3f64, 1e3f64);
                    for h in halfspaces {
                        let a = Vector::from_column_slice(&h.normal);
                        let ad = a.dot(&d);
                        let slack = h.offset - a.dot(&p);
                        if ad > 1e-14 {
                            t_hi = t_hi.min(slack / ad);
                        } else if ad < -1e-14 {
                            t_lo = t_lo.max(slack / ad);
                        }
                    }
                    if t_hi > t_lo {
                        p += d * rng.random_range(t_lo..=t_hi);
                    }
                }
                p
            }
            FeasibleSet::Custom(c) => (c.project)(&gaussian_vector(n, rng)),
        }
    }
}

fn gaussian_vector(n: usize, rng: &mut StreamRng) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Sort-and-threshold projection onto `{ y >= 0 : sum(y) = scale }`.
fn project_simplex(v: &Vector, scale: f64) -> Vector {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - scale) / (i as f64 + 1.0);
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.map(|c| (c - theta).max(0.0))
}

/// Projection onto `{ y : <a_i, y> <= b_i }`. A primal active-set method
/// started at the interior point solves the projection exactly in finitely
/// many steps; Dykstra's method is the fallback if the working-set system
/// becomes singular or the step limit is hit.
fn project_polytope(v: &Vector, halfspaces: &[Halfspace], interior: &[f64]) -> Result<Vector, SetError> {
    let normals: Vec<(Vector, f64)> =
        halfspaces.iter().map(|h| (Vector::from_column_slice(&h.normal), h.offset)).collect();
    match active_set_projection(v, &normals, Vector::from_column_slice(interior)) {
        Some(x) => Ok(x),
        None => dykstra(v, &normals),
    }
}

fn active_set_projection(v: &Vector, normals: &[(Vector, f64)], mut x: Vector) -> Option<Vector> {
    let n = v.len();
    let mut working: Vec<usize> = Vec::new();
    let scale = 1.0 + v.norm() + x.norm();
    for _ in 0..50 * (normals.len() + n) + 100 {
        let g = &x - v;
        let (p, lambda) = if working.is_empty() {
            (-&g, Vec::new())
        } else {
            let a = Matrix::from_fn(working.len(), n, |r, c| normals[working[r]].0[c]);
            let gram = &a * a.transpose();
            let lambda = gram.cholesky()?.solve(&(-(&a * &g)));
            (-&g - a.transpose() * &lambda, lambda.iter().copied().collect())
        };
        if p.norm() <= 1e-13 * scale {
            match lambda.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((i, l)) if *l < -1e-13 * scale => {
                    working.remove(i);
                    continue;
                }
                _ => return Some(x),
            }
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (i, (a, b)) in normals.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let ap = a.dot(&p);
            if ap > 0.0 {
                let step = ((b - a.dot(&x)) / ap).max(0.0);
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        x += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    None
}

/// Dykstra's alternating projections onto an intersection of halfspaces.
fn dykstra(v: &Vector, normals: &[(Vector, f64)]) -> Result<Vector, SetError> {
    let mut x = v.clone();
    let mut corrections = vec![Vector::zeros(v.len()); normals.len()];
    for _ in 0..DYKSTRA_MAX_SWEEPS {
        let prev = x.clone();
        for ((a, b), p) in normals.iter().zip(corrections.iter_mut()) {
            let y = &x + &*p;
            let excess = a.dot(&y) - b;
            x = if excess > 0.0 { &y - a * (excess / a.norm_squared()) } else { y.clone() };
            *p = y - &x;
        }
        if (&x - prev).norm() <= DYKSTRA_TOL {
            return Ok(x);
        }
    }
    Err(SetError::NonConvergence(DYKSTRA_MAX_SWEEPS))
}

/// Minimizer of `<z, y - x> + rho/2 |y - x|^2` over the set.
pub fn solve_subproblem(set: &FeasibleSet, x: &Vector, z: &Vector, rho: f64) -> Result<Vector, SetError> {
    set.project(&(x - z / rho))
}

/// Value of the subproblem objective at direction `d = y - x`.
pub fn gap_value(z: &Vector, d: &Vector, rho: f64) -> f64 {
    z.dot(d) + 0.5 * rho * d.norm_squared()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gap {
    pub eta: f64,
    pub y: Vector,
}

/// The gap function `eta(x, z)` together with its minimizer.
pub fn gap(set: &FeasibleSet, x: &Vector, z: &Vector, rho: f64) -> Result<Gap, SetError> {
    let y = solve_subproblem(set, x, z, rho)?;
    let eta = gap_value(z, &(&y - x), rho);
    Ok(Gap { eta, y })
}

/// Stationarity certificate: `|eta| <= 1e-8 (1 + |z|)`.
pub fn is_stationary(eta: f64, z: &Vector) -> bool {
    eta.abs() <= STATIONARITY_TOL * (1.0 + z.norm())
}
