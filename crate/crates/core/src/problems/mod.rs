//! Shipped problem families and their JSON construction.
//!
//! A problem document is an object with a `family` tag plus the fields of
//! that family:
//!
//! | family             | fields                    |
//! |--------------------|---------------------------|
//! | `synthetic_smooth` | [`synthetic::SyntheticSpec`] |
//! | `risk_p1`          | [`risk::RiskSpec`]           |
//! | `risk_p2`          | [`risk::RiskSpec`]           |
//! | `svi`              | [`svi::SviSpec`]             |

pub mod risk;
pub mod svi;
pub mod synthetic;

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::model::CompositionProblem;
use crate::Vector;

pub use risk::{RiskOrder, RiskSpec, ScenarioSet};
pub use svi::{SviInstance, SviSpec};
pub use synthetic::{SyntheticSmooth, SyntheticSpec};

pub const FAMILIES: [&str; 4] = ["synthetic_smooth", "risk_p1", "risk_p2", "svi"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("unknown problem family {0:?} (known: synthetic_smooth, risk_p1, risk_p2, svi)")]
    UnknownFamily(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("malformed problem description: {0}")]
    Spec(String),
    #[error("{0}")]
    Io(String),
    #[error("problem has no exact evaluators")]
    MissingExact,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProblemSpec {
    SyntheticSmooth(SyntheticSpec),
    RiskP1(RiskSpec),
    RiskP2(RiskSpec),
    Svi(SviSpec),
}

impl ProblemSpec {
    pub fn from_json(value: &serde_json::Value) -> Result<Self, ProblemError> {
        let family = value
            .get("family")
            .ok_or_else(|| ProblemError::Spec("missing field `family`".into()))?
            .as_str()
            .ok_or_else(|| ProblemError::Spec("`family` must be a string".into()))?;
        if !FAMILIES.contains(&family) {
            return Err(ProblemError::UnknownFamily(family.to_string()));
        }
        serde_json::from_value(value.clone()).map_err(|e| ProblemError::Spec(e.to_string()))
    }

    /// Relative scenario paths are resolved against `base_dir`.
    pub fn build(&self, base_dir: Option<&Path>) -> Result<CompositionProblem, ProblemError> {
        match self {
            ProblemSpec::SyntheticSmooth(s) => Ok(SyntheticSmooth::generate(s)?.into_problem()),
            ProblemSpec::RiskP1(s) => risk::build(s, RiskOrder::P1, base_dir),
            ProblemSpec::RiskP2(s) => risk::build(s, RiskOrder::P2, base_dir),
            ProblemSpec::Svi(s) => Ok(SviInstance::generate(s)?.into_problem()),
        }
    }
}

pub fn make_problem(spec: &serde_json::Value) -> Result<CompositionProblem, ProblemError> {
    make_problem_in(spec, None)
}

pub fn make_problem_in(spec: &serde_json::Value, base_dir: Option<&Path>) -> Result<CompositionProblem, ProblemError> {
    ProblemSpec::from_json(spec)?.build(base_dir)
}

/// The fully nested value `F_m(x)`, `m` 1-based.
pub fn eval_exact_fm(problem: &CompositionProblem, x: &Vector, m: usize) -> Result<Vector, ProblemError> {
    if m == 0 || m > problem.levels() {
        return Err(ProblemError::InvalidParam(format!("level {m} out of range 1..={}", problem.levels())));
    }
    let values = problem.exact_nested_values(x).map_err(|e| match e {
        crate::model::ModelError::MissingExact => ProblemError::MissingExact,
        other => ProblemError::InvalidParam(other.to_string()),
    })?;
    Ok(values[m - 1].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_problem;
    use serde_json::json;

    #[test]
    fn synthetic_from_json_validates() {
        let p = make_problem(&json!({"family": "synthetic_smooth", "n": 5, "levels": 3})).unwrap();
        assert!(validate_problem(&p).is_empty());
        assert_eq!(p.levels(), 3);
    }

    #[test]
    fn negative_kappa_is_rejected() {
        let spec = json!({
            "family": "risk_p1",
            "kappa": -0.1,
            "scenarios": {"source": "generate", "count": 10, "n": 3}
        });
        assert!(matches!(make_problem(&spec), Err(ProblemError::InvalidParam(_))));
    }

    #[test]
    fn bad_epsilon_and_r_are_rejected() {
        let spec = json!({
            "family": "risk_p2", "kappa": 0.5, "epsilon": 0.0,
            "scenarios": {"source": "generate", "count": 10, "n": 3}
        });
        assert!(matches!(make_problem(&spec), Err(ProblemError::InvalidParam(_))));
        let spec = json!({"family": "svi", "n": 3, "r": -1.0});
        assert!(matches!(make_problem(&spec), Err(ProblemError::InvalidParam(_))));
    }

    #[test]
    fn svi_identity_from_json() {
        let spec = json!({
            "family": "svi",
            "n": 2,
            "operator": {"a": [[1.0, 0.0], [0.0, 1.0]], "b": [-1.0, -1.0]},
            "set": {"type": "box", "lo": [0.0, 0.0], "hi": [2.0, 2.0]}
        });
        let p = make_problem(&spec).unwrap();
        let x = p.exact().unwrap().solution.clone().unwrap();
        assert!((x - Vector::from_element(2, 1.0)).amax() < 1e-10);
    }

    #[test]
    fn unknown_family_and_unknown_fields() {
        assert!(matches!(make_problem(&json!({"family": "lasso"})), Err(ProblemError::UnknownFamily(_))));
        assert!(matches!(make_problem(&json!({"n": 3})), Err(ProblemError::Spec(_))));
        let spec = json!({"family": "synthetic_smooth", "n": 5, "levels": 3, "colour": 1});
        assert!(matches!(make_problem(&spec), Err(ProblemError::Spec(_))));
    }

    #[test]
    fn three_level_risk_validates() {
        let spec = json!({
            "family": "risk_p2", "kappa": 0.5,
            "scenarios": {"source": "generate", "count": 40, "n": 4, "seed": 3}
        });
        let p = make_problem(&spec).unwrap();
        assert_eq!(validate_problem(&p), vec![]);
        assert_eq!(p.levels(), 3);
    }

    #[test]
    fn csv_scenarios_resolve_relative_to_base_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.csv"), "weight,a1,a2,b\n1,1,2,0\n1,2,1,0\n").unwrap();
        let spec = json!({"family": "risk_p1", "kappa": 0.2, "scenarios": {"source": "csv", "path": "s.csv"}});
        let p = make_problem_in(&spec, Some(dir.path())).unwrap();
        assert_eq!(p.n, 2);
        assert!(make_problem(&spec).is_err());
    }

    #[test]
    fn nested_value_errors() {
        let p = make_problem(&json!({"family": "synthetic_smooth", "n": 2, "levels": 2})).unwrap();
        assert!(eval_exact_fm(&p, &Vector::zeros(2), 3).is_err());
        assert_eq!(eval_exact_fm(&p, &Vector::zeros(2), 2).unwrap().len(), 3);
        let mut q = p.clone();
        q.exact = None;
        assert_eq!(eval_exact_fm(&q, &Vector::zeros(2), 1), Err(ProblemError::MissingExact));
    }
}
