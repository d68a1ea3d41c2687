//! End-to-end tests of the `nestcomp` binary.

use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nestcomp"))
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn small_config() -> Value {
    json!({
        "schema_version": 1,
        "seed": 9,
        "problem": {"family": "synthetic_smooth", "n": 4, "levels": 3,
                    "noise": {"value_noise_sd": 0.1, "jac_noise_sd": 0.1}},
        "params": {"a": 1.0, "b": 1.0, "rho": 1.0,
                   "schedule": {"type": "diminishing", "tau0": 1.0, "gamma": 0.75}},
        "iterations": 100,
        "diagnostics": {"lyapunov": "auto"}
    })
}

fn write_config(dir: &TempDir, value: &Value) -> PathBuf {
    let path = dir.path().join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn exec(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--out").arg(out).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &small_config());
    let out = dir.path().join("out");
    let o = exec(&["run"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 101);
    assert_eq!(
        lines[0],
        "k,tau,d_norm_sq,eta,measure_sq,measure_mixed,t_1,t_2,t_3,res_1,res_2,res_3,f1,lyap_w,lyap_ws"
    );
    assert!(lines[1].starts_with("0,1,"));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 100);
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["final"]["x"].as_array().unwrap().len(), 4);
    assert!(summary["final"]["distance_to_solution"].as_f64().unwrap().is_finite());
    assert_eq!(summary["within_state_bounds"], true);
    assert_eq!(summary["gammas"].as_array().unwrap().len(), 2);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &small_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(exec(&["run"], &cfg, &a).status.success());
    assert!(exec(&["run", "--threads", "8"], &cfg, &b).status.success());
    for f in ["trace.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &small_config());
    let mut other = small_config();
    other["seed"] = json!(123);
    let cfg2 = dir.path().join("other.json");
    fs::write(&cfg2, other.to_string()).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(bin().args(["run", "--seed", "123", "--config"]).arg(&cfg).arg("--out").arg(&a).status().unwrap().success());
    assert!(exec(&["run"], &cfg2, &b).status.success());
    assert!(exec(&["run"], &cfg, &c).status.success());
    let trace = |d: &Path| fs::read(d.join("trace.csv")).unwrap();
    assert_eq!(trace(&a), trace(&b));
    assert_ne!(trace(&a), trace(&c));
}

#[test]
fn missing_rho_is_a_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg["params"].as_object_mut().unwrap().remove("rho");
    let path = write_config(&dir, &cfg);
    for verb in ["run", "validate", "rate-experiment"] {
        let o = exec(&[verb], &path, &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(1), "{verb}");
        assert!(stderr(&o).contains("rho"), "{verb}: {}", stderr(&o));
    }
}

#[test]
fn validate_reports_problems() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = exec(&["validate"], &write_config(&dir, &small_config()), &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut unknown = small_config();
    unknown["problem"] = json!({"family": "portfolio"});
    let o = exec(&["validate"], &write_config(&dir, &unknown), &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("portfolio"));

    let mut mismatch = small_config();
    mismatch["problem"] = json!({
        "family": "risk_p1", "kappa": 0.5,
        "scenarios": {"source": "generate", "count": 10, "n": 3},
        "set": {"type": "simplex", "dim": 4, "scale": 1.0}
    });
    let o = exec(&["validate"], &write_config(&dir, &mismatch), &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));

    let mut bad_init = small_config();
    bad_init["init"] = json!({"x": [0.0, 0.0]});
    let o = exec(&["validate"], &write_config(&dir, &bad_init), &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("init.x"));
}

#[test]
fn runtime_failure_names_the_iteration() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg["params"]["schedule"] = json!({"type": "custom", "steps": [0.5, 0.5, 0.5]});
    cfg["iterations"] = json!(10);
    let o = exec(&["run"], &write_config(&dir, &cfg), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("iteration 3"), "{}", stderr(&o));
}

#[test]
fn rate_experiment_contract() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg["rate_experiment"] = json!({"horizons": [100, 1000, 10000], "replications": 10});
    let path = write_config(&dir, &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = exec(&["rate-experiment", "--threads", "1"], &path, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(exec(&["rate-experiment", "--threads", "8"], &path, &b).status.success());
    let text = fs::read(a.join("rate.json")).unwrap();
    assert_eq!(text, fs::read(b.join("rate.json")).unwrap());
    let rate: Value = serde_json::from_slice(&text).unwrap();
    assert!(rate["slope"].as_f64().unwrap().is_finite());
    assert_eq!(rate["horizons"].as_array().unwrap().len(), 3);
    assert_eq!(rate["horizons"][0]["replications"].as_array().unwrap().len(), 10);
    assert_eq!(rate["tracking"].as_array().unwrap().len(), 3);

    cfg["rate_experiment"]["replications"] = json!(0);
    let o = exec(&["rate-experiment"], &write_config(&dir, &cfg), &a);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("replications"));
}

#[test]
fn shipped_configs_validate() {
    let dir = TempDir::new().unwrap();
    for name in ["smooth_run.json", "smooth_rate.json", "risk_p1.json", "risk_p2.json", "svi.json"] {
        let o = exec(&["validate"], &shipped(name), dir.path());
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
    }
}
