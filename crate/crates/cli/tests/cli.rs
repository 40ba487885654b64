use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dd-iss"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn benchmark_json() -> Value {
    let o = bin().arg("config").output().unwrap();
    assert_eq!(code(&o), 0);
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

#[test]
fn collect_is_byte_reproducible_and_has_fifty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["collect"], &a)), 0);
    assert_eq!(code(&run(&["collect"], &b)), 0);
    let ca = std::fs::read(a.join("dataset.csv")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("dataset.csv")).unwrap());
    let text = String::from_utf8(ca).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,x1,x2,u1,xdot1,xdot2");
    assert_eq!(text.lines().count(), 51);
    let meta: Value = serde_json::from_slice(&std::fs::read(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["multi_trajectory"], true);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);

    let c = dir.path().join("c");
    assert_eq!(code(&bin().args(["--seed", "4", "collect", "--out"]).arg(&c).output().unwrap()), 0);
    assert_ne!(std::fs::read(a.join("dataset.csv")).unwrap(), std::fs::read(c.join("dataset.csv")).unwrap());
}

#[test]
fn zero_samples_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_json();
    cfg["collection"]["samples_per_trajectory"] = 0.into();
    let p = write_config(dir.path(), "cfg.json", &cfg);
    let o = run(&["--config", p.to_str().unwrap(), "collect"], &dir.path().join("o"));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn two_trajectories_are_flagged_and_one_is_not() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_json();
    cfg["collection"]["initial_states"] = serde_json::json!([[2.0, -2.0], [-2.0, 2.0]]);
    let p = write_config(dir.path(), "two.json", &cfg);
    let o = run(&["--config", p.to_str().unwrap(), "collect"], &dir.path().join("two"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("10 samples, multi-trajectory true"));

    cfg["collection"]["initial_states"] = serde_json::json!([[2.0, -2.0]]);
    let p = write_config(dir.path(), "one.json", &cfg);
    let o = run(&["--config", p.to_str().unwrap(), "collect"], &dir.path().join("one"));
    assert!(stdout(&o).contains("5 samples, multi-trajectory false"));
}

#[test]
fn noise_bound_violation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_json();
    cfg["delta"] = 0.01.into();
    let p = write_config(dir.path(), "cfg.json", &cfg);
    let o = run(&["--config", p.to_str().unwrap(), "collect"], &dir.path().join("o"));
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("delta"), "{}", stderr(&o));
}

#[test]
fn rank_deficient_data_warns_before_solving() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_json();
    cfg["collection"]["initial_states"] = serde_json::json!([[2.0, -2.0]]);
    cfg["collection"]["samples_per_trajectory"] = 3.into();
    let p = write_config(dir.path(), "cfg.json", &cfg);
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["--config", p.to_str().unwrap(), "collect"], &out)), 0);
    let o = run(&["--config", p.to_str().unwrap(), "overapprox"], &out);
    assert!(stdout(&o).starts_with("rank check:"), "{}", stdout(&o));
    assert!(stdout(&o).contains("full row rank false"));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn corrupted_csv_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["collect"], &out)), 0);
    let csv = out.join("dataset.csv");
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text = text.replacen(",", ",oops", 3);
    std::fs::write(&csv, text).unwrap();
    let o = run(&["overapprox"], &out);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn stages_refuse_outputs_of_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["collect"], &out)), 0);
    let o = bin().args(["--seed", "9", "overapprox", "--out"]).arg(&out).output().unwrap();
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("produced by config"), "{}", stderr(&o));
}

#[test]
fn synth_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_json();
    cfg["system"] = Value::Null;
    let p = write_config(dir.path(), "nosys.json", &cfg);
    let o = run(&["--config", p.to_str().unwrap(), "synth", "model-based"], &dir.path().join("a"));
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("system spec"), "{}", stderr(&o));

    let mut cfg = benchmark_json();
    cfg["programs"]["iss-w-biconvex"]["synth"]["initial_guess_k"] = serde_json::json!([]);
    let p = write_config(dir.path(), "noguess.json", &cfg);
    let o = run(&["--config", p.to_str().unwrap(), "synth", "iss-w-biconvex"], &dir.path().join("b"));
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("initial controller guess"), "{}", stderr(&o));

    let o = run(&["synth", "no-such-program"], &dir.path().join("c"));
    assert_eq!(code(&o), 4);
}

#[test]
fn verify_detects_a_corrupted_certificate_and_a_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["synth", "model-based"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["verify", "model-based"], &out);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("PASS model-based"));
    let trace = std::fs::read_to_string(out.join("model-based.trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "t,Vdot,bound,margin");

    let o = bin().args(["--seed", "5", "verify", "model-based", "--out"]).arg(&out).output().unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let path = out.join("model-based.cert.json");
    let mut file: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let terms = file["certificate"]["v"].as_array_mut().unwrap();
    let (i, _) = terms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1["coeff"].as_f64().unwrap().abs().total_cmp(&b.1["coeff"].as_f64().unwrap().abs()))
        .unwrap();
    let c = terms[i]["coeff"].as_f64().unwrap();
    terms[i]["coeff"] = (-c).into();
    std::fs::write(&path, serde_json::to_vec(&file).unwrap()).unwrap();
    let o = run(&["verify", "model-based"], &out);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("FAIL model-based"));
}

#[test]
fn zero_disturbance_verification_passes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_json();
    cfg["trace"]["disturbance"] = serde_json::json!({"kind": "zero"});
    let p = write_config(dir.path(), "cfg.json", &cfg);
    let out = dir.path().join("o");
    let c = p.to_str().unwrap();
    assert_eq!(code(&run(&["--config", c, "synth", "model-based"], &out)), 0);
    let o = run(&["--config", c, "verify"], &out);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn report_errors_on_an_empty_directory_and_marks_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report"], &dir.path().join("missing"));
    assert_eq!(code(&o), 4);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["report"], &empty)), 4);

    let out = dir.path().join("partial");
    assert_eq!(code(&run(&["synth", "model-based"], &out)), 0);
    let o = run(&["report"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| program")).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().any(|r| r.starts_with("| gas | not run | - |")));
    assert!(rows.iter().any(|r| r.starts_with("| model-based | feasible |")));
    assert!(out.join("report.md").exists());
}

#[test]
fn full_pipeline_reports_six_programs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["collect"], &out)), 0);
    let o = run(&["overapprox"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("true system in ellipsoid: true"));
    for p in ["gas", "iss-w-biconvex", "iss-d-biconvex", "model-based"] {
        let o = run(&["synth", p], &out);
        assert_eq!(code(&o), 0, "{p}: {}", stderr(&o));
    }
    let o = run(&["verify"], &out);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 4);
    let o = run(&["report"], &out);
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| program")).count(), 6);
    assert!(text.contains("| iss-d-biconvex | feasible |"));
    assert!(text.contains("| iss-w-convex | not run |"));
}
