use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn qnnv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnnv")).args(args).output().expect("binary runs")
}

fn first_query(dir: &Path) -> (PathBuf, i64, usize) {
    let qs: Value = serde_json::from_slice(&std::fs::read(fixture("digits_queries.json")).unwrap()).unwrap();
    let q = &qs[0];
    let input = dir.join("input.json");
    std::fs::write(&input, q["input"].to_string()).unwrap();
    (input, q["radius"].as_i64().unwrap(), q["label"].as_u64().unwrap() as usize)
}

#[test]
fn verify_robust_query_exits_zero_and_dumps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (input, radius, label) = first_query(dir.path());
    let bounds = dir.path().join("bounds.json");
    let lp_dir = dir.path().join("lp");
    let out = qnnv(&[
        "verify",
        "--model",
        fixture("digits_mlp.json").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--label",
        &label.to_string(),
        "--radius",
        &radius.to_string(),
        "--mode",
        "ilp",
        "--timeout",
        "30",
        "--emit-lp",
        lp_dir.to_str().unwrap(),
        "--bounds-dump",
        bounds.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "ROBUST");
    assert_eq!(v["stage"], "ilp");
    let b: Value = serde_json::from_slice(&std::fs::read(&bounds).unwrap()).unwrap();
    assert!(b["L0.n0.acc"].is_array() && b["x0"].is_array());
    assert!(std::fs::read_dir(&lp_dir).unwrap().count() >= 1);
}

#[test]
fn misclassified_center_is_decisive() {
    let dir = tempfile::tempdir().unwrap();
    let (input, _, label) = first_query(dir.path());
    let wrong = (label + 1) % 10;
    let out = qnnv(&[
        "verify",
        "--model",
        fixture("digits_mlp.json").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--label",
        &wrong.to_string(),
        "--radius",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "MISCLASSIFIED");
}

#[test]
fn batch_writes_report_with_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let qs: Value = serde_json::from_slice(&std::fs::read(fixture("digits_queries.json")).unwrap()).unwrap();
    let few = Value::Array(qs.as_array().unwrap()[..5].to_vec());
    let qfile = dir.path().join("q.json");
    std::fs::write(&qfile, few.to_string()).unwrap();
    let report = dir.path().join("report.json");
    let out = qnnv(&[
        "batch",
        "--model",
        fixture("digits_mlp.json").to_str().unwrap(),
        "--queries",
        qfile.to_str().unwrap(),
        "--mode",
        "eqv",
        "--timeout",
        "30",
        "--jobs",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["total"], 5);
    let sum: f64 = ["rob_pct", "uns_pct", "unk_pct", "mis_pct"]
        .iter()
        .map(|k| r[k].as_f64().unwrap())
        .sum();
    assert!((sum - 100.0).abs() < 1e-9);
    assert!(r["total_time_s"].as_f64().unwrap() >= 0.0);
    for q in r["instances"].as_array().unwrap() {
        assert!(q["status"].is_string() && q["time_s"].is_number());
    }
}

#[test]
fn timeout_yields_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let qs: Value = serde_json::from_slice(&std::fs::read(fixture("digits_queries.json")).unwrap()).unwrap();
    // Query 38 at radius 4 is not decided by bounds and needs a long search.
    let q = &qs[38];
    let input = dir.path().join("input.json");
    std::fs::write(&input, q["input"].to_string()).unwrap();
    let out = qnnv(&[
        "verify",
        "--model",
        fixture("digits_mlp.json").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--label",
        &q["label"].to_string(),
        "--radius",
        &q["radius"].to_string(),
        "--mode",
        "ilp",
        "--timeout",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "UNKNOWN");
}

#[test]
fn errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format_version\": 1,").unwrap();
    let input = dir.path().join("input.json");
    std::fs::write(&input, "[1, 2]").unwrap();
    let out = qnnv(&[
        "verify", "--model", bad.to_str().unwrap(), "--input", input.to_str().unwrap(), "--label", "0", "--radius", "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    let out = qnnv(&[
        "verify",
        "--model",
        fixture("digits_mlp.json").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--label",
        "0",
        "--radius",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("64"));
}
