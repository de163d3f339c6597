use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], env: &[(&str, &str)]) -> (i32, Value, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fiocalc"));
    cmd.args(args).env_remove("FIOCALC_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let json = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap(), json, stdout)
}

fn with_config(command: &str, name: &str) -> (i32, Value, String) {
    let path = configs().join(name);
    run(&[command, "--config", path.to_str().unwrap()], &[])
}

fn temp_config(text: &str) -> tempfile::NamedTempFile {
    let f = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(f.path(), text).unwrap();
    f
}

#[test]
fn analyze_reports_kind_and_excess() {
    let (code, r, _) = with_config("analyze", "analyze_nondegenerate.toml");
    assert_eq!(code, 0);
    assert_eq!(r["kind"], "non-degenerate");
    assert_eq!(r["excess"], 0);

    let (code, r, _) = with_config("analyze", "analyze_clean.toml");
    assert_eq!(code, 0);
    assert_eq!(r["kind"], "clean");
    assert_eq!(r["excess"], 1);
}

#[test]
fn reports_carry_header() {
    let (_, r, _) = with_config("analyze", "analyze_nondegenerate.toml");
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["toolkit"], "fiocalc");
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["command"], "analyze");
    let text = std::fs::read(configs().join("analyze_nondegenerate.toml")).unwrap();
    assert_eq!(r["config_sha256"], fiocalc::report::sha256_hex(&text));
}

#[test]
fn malformed_expression_exits_one_with_position() {
    let (code, r, _) = with_config("analyze", "bad_expr.toml");
    assert_eq!(code, 1);
    assert_eq!(r["error"]["code"], "expr_parse");
    assert_eq!(r["error"]["diagnostics"]["line"], 1);
    assert_eq!(r["error"]["diagnostics"]["column"], 13);
}

#[test]
fn missing_compose_section_exits_one() {
    let (code, r, _) = with_config("compose", "analyze_clean.toml");
    assert_eq!(code, 1);
    assert_eq!(r["error"]["code"], "missing_section");
}

#[test]
fn usage_errors_exit_one() {
    let (code, r, _) = run(&["analyze"], &[]);
    assert_eq!(code, 1);
    assert_eq!(r["error"]["code"], "usage");
    assert_eq!(run(&["analyze", "--no-such-flag"], &[]).0, 1);
    assert_eq!(run(&["frobnicate"], &[]).0, 1);
    let f = temp_config("[phase]\nexpr = \"x1*theta1\"\nn = 1\nshape = 2\n");
    let (code, r, _) = run(&["analyze", "--config", f.path().to_str().unwrap()], &[]);
    assert_eq!(code, 1);
    assert_eq!(r["error"]["code"], "config_parse");
}

#[test]
fn degenerate_phase_is_a_validation_failure() {
    let f = temp_config("[phase]\nexpr = \"x1^2*theta1\"\nn = 1\npoint = [0.0, 1.0]\n");
    let (code, r, _) = run(&["analyze", "--config", f.path().to_str().unwrap()], &[]);
    assert_eq!(code, 2);
    assert_eq!(r["kind"], "degenerate-invalid");
    assert_eq!(r["pass"], false);
}

#[test]
fn gaussian_stationary_slope() {
    let (code, r, _) = with_config("stationary-phase", "stationary_gaussian.toml");
    assert_eq!(code, 0);
    let slope = r["slope"].as_f64().unwrap();
    assert!((-1.65..=-1.35).contains(&slope), "{slope}");
    let c0 = &r["c0"];
    assert!((c0["re"].as_f64().unwrap() - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
}

#[test]
fn identity_composition_cross_check() {
    let (code, r, _) = with_config("compose", "compose_identity.toml");
    assert_eq!(code, 0);
    assert_eq!(r["excess"], 0);
    assert!(r["cross_check"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn symbol_and_oracle_commands() {
    let (code, r, _) = with_config("symbol", "symbol_linear.toml");
    assert_eq!(code, 0, "{r}");
    assert_eq!(r["excess"], 0);
    assert!(r["pairing"]["samples"][0]["rel_error"].as_f64().unwrap() <= 1e-2);

    let (code, r, _) = with_config("oracle", "stationary_gaussian.toml");
    assert_eq!(code, 0);
    assert_eq!(r["samples"].as_array().unwrap().len(), 5);
}

#[test]
fn out_flag_threads_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let cfg = configs().join("analyze_clean.toml");
    let cfg = cfg.to_str().unwrap();
    let (code, _, stdout) = run(&["analyze", "--config", cfg, "--out", a.to_str().unwrap(), "--threads", "1"], &[]);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    let (code, _, _) = run(&["analyze", "--config", cfg, "--out", b.to_str().unwrap()], &[("FIOCALC_THREADS", "2")]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // The seed changes the sample points, hence the report.
    let (_, _, s1) = run(&["analyze", "--config", cfg, "--seed", "1"], &[]);
    let (_, _, s2) = run(&["analyze", "--config", cfg, "--seed", "2"], &[]);
    assert_ne!(s1, s2);
}

#[test]
fn validate_runs_selected_criteria() {
    let f = temp_config("[validate]\ncriteria = [1, 5]\n");
    let (code, r, _) = run(&["validate", "--config", f.path().to_str().unwrap()], &[]);
    assert_eq!(code, 0);
    assert_eq!(r["total"], 2);
    let ids: Vec<u64> = r["criteria"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [1, 5]);
}
