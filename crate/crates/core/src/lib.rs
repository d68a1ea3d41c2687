//! Single time-scale stochastic subgradient method for constrained
//! multi-level composition problems
//!
//! ```text
//! min_{x in X} f_1(x, f_2(x, ... f_{M-1}(x, f_M(x)) ...))
//! ```
//!
//! where every level is observed only through noisy value and Jacobian
//! estimates. The method keeps a path-averaged subgradient estimate `z` and
//! one filtered tracker `u_m` per level, all driven by a single stepsize
//! sequence.
//!
//! Module map:
//!
//! - [`model`]: problem, state and parameter types, problem validation
//! - [`oracle`]: stochastic oracle contract, noise models, finite differences
//! - [`feasible`]: constraint sets, projections, the regularized subproblem
//!   and the gap function
//! - [`solver`]: the iteration itself and full runs
//! - [`problems`]: shipped instances (synthetic smooth, mean-semideviation
//!   risk, stochastic variational inequality)
//! - [`diagnostics`]: run records, optimality measures, Lyapunov values,
//!   rate fitting
//! - [`cli`]: JSON configuration and the `run` / `rate-experiment` /
//!   `validate` commands

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod feasible;
pub mod model;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod solver;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

pub use diagnostics::{RunRecord, TraceRow};
pub use feasible::FeasibleSet;
pub use model::{AlgorithmParams, CompositionProblem, InitPolicy, IterateState, StepSchedule};
pub use oracle::{LevelOracle, NoiseModel, OracleSample};
pub use solver::{run, step, RunOptions};
