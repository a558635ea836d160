use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attrition-pqr"));
    c.env_remove("ATTRITION_PQR_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulated(dir: &Path, seed: &str) -> PathBuf {
    let p = dir.join(format!("panel_{seed}.csv"));
    let o = run(&["--seed", seed, "simulate", "--design", "d3", "--n", "40", "--t", "4", "-o", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert!(stdout(&run(&["estimate", "--help"])).contains("--lambda-method"));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&["simulate", "--bogus"]).status.code(), Some(64));
    assert_eq!(run(&["replicate-table", "--table", "t1", "--scale", "0"]).status.code(), Some(64));
    assert_eq!(run(&["--workers", "0", "simulate"]).status.code(), Some(64));
}

#[test]
fn invalid_panels_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "subject_id,period,response,x_1\na,1,1,0\na,2,,0\na,3,2,0\nb,1,1,1\nb,2,2,1\nb,3,3,1\n").unwrap();
    let o = run(&["estimate", "--panel", p.to_str().unwrap(), "--estimator", "qr"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-monotone"));
}

#[test]
fn default_estimate_warns_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulated(dir.path(), "3");
    let o = run(&["--format", "json", "estimate", "--panel", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("assuming selection on observables"));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["vartheta", "std_errors", "lambda_used", "mechanism", "n_observed"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v.get("residuals").is_none());
}

#[test]
fn csv_output_is_a_coefficient_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulated(dir.path(), "4");
    let o = run(&["--format", "csv", "estimate", "--panel", p.to_str().unwrap(), "--estimator", "fe"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("term,estimate,std_error"));
    assert!(lines.any(|l| l.starts_with("x_1,")));
}

#[test]
fn seed_sources_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 9, "n": 20, "t": 3}"#).unwrap();
    let flag = stdout(&run(&["--seed", "9", "simulate", "--design", "d1a", "--n", "20", "--t", "3"]));
    let from_cfg = stdout(&run(&["--config", cfg.to_str().unwrap(), "simulate", "--design", "d1a"]));
    let from_env = stdout(
        &bin().env("ATTRITION_PQR_SEED", "9").args(["simulate", "--design", "d1a", "--n", "20", "--t", "3"]).output().unwrap(),
    );
    let other = stdout(&run(&["--seed", "10", "simulate", "--design", "d1a", "--n", "20", "--t", "3"]));
    assert_eq!(flag, from_cfg);
    assert_eq!(flag, from_env);
    assert_ne!(flag, other);
    assert_eq!(flag.lines().count(), 61);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"sed": 9}"#).unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "simulate"]).status.code(), Some(64));
}

#[test]
fn select_lambda_reports_the_rule() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulated(dir.path(), "5");
    let o = run(&["--format", "json", "select-lambda", "--panel", p.to_str().unwrap(), "--draws", "100"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["method"], "robust");
    assert!(v["value"].as_f64().unwrap() > 0.0);
    assert_eq!(v["draws"], 100);
}
