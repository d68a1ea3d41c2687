//! Shipped problem families: oracle/exact agreement, Jacobians against
//! finite differences, and boundedness of long runs.

use nestcomp::diagnostics::derive_state_bounds;
use nestcomp::model::{validate_problem, CompositionProblem};
use nestcomp::oracle::{finite_difference_reference, sample_level};
use nestcomp::problems::risk::{risk_problem, RiskOrder, ScenarioModel};
use nestcomp::problems::{make_problem, ScenarioSet};
use nestcomp::rng::stream;
use nestcomp::{AlgorithmParams, RunOptions, StepSchedule, Vector};
use rand::Rng;
use serde_json::json;

struct Shipped {
    problem: CompositionProblem,
    /// Scenario set of risk families, for locating kinks.
    scenarios: Option<ScenarioSet>,
}

fn shipped_noise_free() -> Vec<Shipped> {
    let mut out: Vec<Shipped> = [
        json!({"family": "synthetic_smooth", "n": 5, "levels": 3}),
        json!({"family": "synthetic_smooth", "n": 10, "levels": 4, "inner_dim": 2, "instance_seed": 9}),
        json!({"family": "svi", "n": 6}),
    ]
    .iter()
    .map(|s| Shipped { problem: make_problem(s).unwrap(), scenarios: None })
    .collect();
    let set = ScenarioSet::generate(30, 4, 0).unwrap();
    for (order, relu) in [(RiskOrder::P1, false), (RiskOrder::P2, false), (RiskOrder::P1, true)] {
        let problem = risk_problem(ScenarioModel::Discrete(set.clone()), order, 0.5, 1e-3, relu, None).unwrap();
        out.push(Shipped { problem, scenarios: Some(set.clone()) });
    }
    out
}

/// Inner arguments near the nested values at `x`, so that risk levels see
/// realistic trackers.
fn inner_points(p: &CompositionProblem, x: &Vector, rng: &mut impl Rng) -> Vec<Option<Vector>> {
    let values = p.exact_nested_values(x).unwrap();
    (1..=p.levels())
        .map(|m| (m < p.levels()).then(|| values[m].map(|v| v + rng.random_range(-0.3..0.3))))
        .collect()
}

/// Two draws with the same inputs and the same stream are identical.
#[test]
fn oracle_draws_are_idempotent() {
    for Shipped { problem: p, .. } in shipped_noise_free() {
        let x = p.probe_point().unwrap();
        let mut rng = stream(1, 0, 0, 0);
        let inner = inner_points(&p, &x, &mut rng);
        for m in 1..=p.levels() {
            let a = sample_level(p.oracles[m - 1].as_ref(), &x, inner[m - 1].as_ref(), 3, &mut stream(4, 0, m as u64, 3));
            let b = sample_level(p.oracles[m - 1].as_ref(), &x, inner[m - 1].as_ref(), 3, &mut stream(4, 0, m as u64, 3));
            assert_eq!(a.unwrap(), b.unwrap(), "{} level {m}", p.name);
        }
    }
}

#[test]
fn noise_free_smooth_oracles_match_exact_evaluators() {
    for p in shipped_noise_free().into_iter().filter(|s| s.scenarios.is_none()).map(|s| s.problem) {
        let exact = p.exact().unwrap();
        let mut rng = stream(2, 0, 0, 0);
        for i in 0..100 {
            let x = p.feasible_set.sample_point(&mut rng);
            let inner = inner_points(&p, &x, &mut rng);
            for m in 1..=p.levels() {
                let u = inner[m - 1].as_ref();
                let s = sample_level(p.oracles[m - 1].as_ref(), &x, u, i, &mut stream(0, 0, m as u64, i)).unwrap();
                let v = exact.levels[m - 1].value(&x, u).unwrap();
                let j = exact.levels[m - 1].jacobian(&x, u).unwrap();
                assert!((s.value - v).amax() <= 1e-12, "{} level {m}", p.name);
                assert!((s.jacobian - j).amax() <= 1e-12, "{} level {m}", p.name);
            }
        }
    }
}

/// For a finite scenario set the exact level is the probability-weighted
/// average of the per-scenario oracle outputs; enumerate by drawing with
/// many streams and compare the empirical average.
#[test]
fn risk_oracles_average_to_exact_levels() {
    for p in shipped_noise_free().into_iter().filter(|s| s.scenarios.is_some()).map(|s| s.problem) {
        let x = p.probe_point().unwrap();
        let mut rng = stream(5, 0, 0, 0);
        let inner = inner_points(&p, &x, &mut rng);
        let draws = 40_000u64;
        for m in 1..=p.levels() {
            let u = inner[m - 1].as_ref();
            let exact_v = p.exact_level_value(m, &x, u).unwrap();
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for i in 0..draws {
                let s = sample_level(p.oracles[m - 1].as_ref(), &x, u, 0, &mut stream(8, i, m as u64, 0)).unwrap();
                sum += s.value[0];
                sum_sq += s.value[0] * s.value[0];
            }
            let n = draws as f64;
            let mean = sum / n;
            let sd = (sum_sq / n - mean * mean).max(0.0).sqrt();
            assert!((mean - exact_v[0]).abs() <= 4.0 * sd / n.sqrt() + 1e-12, "{} level {m}", p.name);
        }
    }
}

#[test]
fn exact_jacobians_match_finite_differences() {
    for Shipped { problem: p, scenarios } in shipped_noise_free() {
        let exact = p.exact().unwrap();
        let mut rng = stream(3, 0, 0, 0);
        let mut checked = 0;
        for _ in 0..100 {
            let x = p.feasible_set.sample_point(&mut rng);
            let inner = inner_points(&p, &x, &mut rng);
            if scenarios.as_ref().is_some_and(|set| near_kink(set, &x, &inner, 1e-6)) {
                continue;
            }
            checked += 1;
            for m in 1..=p.levels() {
                let u = inner[m - 1].as_ref();
                let level = &exact.levels[m - 1];
                let j = level.jacobian(&x, u).unwrap();
                let fd = finite_difference_reference(|x, u| level.value(x, u).unwrap(), &x, u, 1e-7);
                assert!((&j - &fd).amax() <= 1e-5 * (1.0 + fd.amax()), "{} level {m}: {j} vs {fd}", p.name);
            }
        }
        assert!(checked >= 90, "{}: only {checked} points checked", p.name);
    }
}

/// True when some scenario loss sits within `band` of a kink: a tracker
/// value of the level above, or zero for `max(0, .)` losses.
fn near_kink(set: &ScenarioSet, x: &Vector, inner: &[Option<Vector>], band: f64) -> bool {
    let mut kinks: Vec<f64> = inner.iter().flatten().map(|u| u[0]).collect();
    kinks.push(0.0);
    (0..set.len()).map(|s| set.a[s].dot(x) + set.b[s]).any(|h| kinks.iter().any(|k| (h - k).abs() < band))
}

#[test]
fn long_runs_stay_within_derived_bounds() {
    let specs = [
        json!({"family": "synthetic_smooth", "n": 5, "levels": 3,
               "noise": {"value_noise_sd": 0.1, "jac_noise_sd": 0.1}}),
        json!({"family": "risk_p1", "kappa": 0.5, "scenarios": {"source": "generate", "count": 30, "n": 4}}),
        json!({"family": "risk_p2", "kappa": 0.5, "scenarios": {"source": "generate", "count": 30, "n": 4}}),
        json!({"family": "svi", "n": 6, "noise": {"value_noise_sd": 0.1, "jac_noise_sd": 0.1}}),
    ];
    for spec in specs {
        let p = make_problem(&spec).unwrap();
        assert!(validate_problem(&p).is_empty());
        let params = AlgorithmParams::new(1.0, 1.0, 1.0, StepSchedule::Diminishing { tau0: 1.0, gamma: 0.75 }, 21);
        let mut options = RunOptions::new(100_000);
        options.diagnostics.keep_rows = false;
        let record = nestcomp::run(&p, &params, &options).unwrap();
        let bounds = derive_state_bounds(&p, 200, 21).unwrap();
        let state = record.final_state.as_ref().unwrap();
        assert!(state.is_finite(), "{}", p.name);
        assert!(p.feasible_set.contains(&state.x, 1e-9), "{}", p.name);
        assert!(record.max_z_norm <= bounds.z, "{}: |z| {} > {}", p.name, record.max_z_norm, bounds.z);
        assert!(record.max_u_norm <= bounds.u, "{}: |u| {} > {}", p.name, record.max_u_norm, bounds.u);
    }
}
