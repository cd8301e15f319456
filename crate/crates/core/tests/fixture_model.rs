use std::time::{Duration, Instant};

use qnnv_core::encode::{cone_of_influence, encode_query};
use qnnv_core::interval::analyze;
use qnnv_core::pipeline::{verify, Mode, Status, VerifyConfig};
use qnnv_core::query::load_queries;
use qnnv_core::{forward, load_model, predict, validate_counterexample};
use serde_json::Value;

const MODEL: &[u8] = include_bytes!("fixtures/digits_mlp.json");
const QUERIES: &[u8] = include_bytes!("fixtures/digits_queries.json");
const EXPECTED: &[u8] = include_bytes!("fixtures/digits_expected.json");
/// Counterexample for query 38, found by an external MILP solver (HiGHS) on
/// the exported LP file. The in-repo solver does not find it within 60 s.
const Q38_WITNESS: &[u8] = include_bytes!("fixtures/digits_q38_witness.json");

#[test]
fn fixture_logits_match_reference_values() {
    let m = load_model(MODEL).unwrap();
    assert_eq!((m.input_len(), m.num_classes()), (64, 10));
    let exp: Value = serde_json::from_slice(EXPECTED).unwrap();
    for case in exp["cases"].as_array().unwrap() {
        let x: Vec<i64> = serde_json::from_value(case["input"].clone()).unwrap();
        let want: Vec<i64> = serde_json::from_value(case["logits"].clone()).unwrap();
        assert_eq!(forward(&m, &x).unwrap(), want);
    }
}

#[test]
fn hard_query_is_never_reported_robust() {
    let m = load_model(MODEL).unwrap();
    let q = load_queries(QUERIES, Duration::from_secs(2)).unwrap().swap_remove(38);
    let x: Vec<i64> = serde_json::from_slice(Q38_WITNESS).unwrap();
    assert!(validate_counterexample(&m, &q, &x));
    assert_eq!(predict(&m, &x).unwrap(), 9);
    for mode in Mode::ALL {
        let v = verify(&m, &q, &VerifyConfig::with_mode(mode)).unwrap();
        assert_ne!(v.status, Status::Robust, "mode {mode}");
    }
}

#[test]
fn programs_only_contain_the_compared_logits() {
    let m = load_model(MODEL).unwrap();
    let q = load_queries(QUERIES, Duration::from_secs(2)).unwrap().swap_remove(0);
    let target = (q.label + 1) % 10;
    let live = cone_of_influence(&m, target, q.label);
    let last = live.last().unwrap();
    assert_eq!(last.iter().filter(|&&l| l).count(), 2);
    assert!(last[target] && last[q.label]);
    let bounds = analyze(&m, &q).unwrap().bounds;
    let enc = encode_query(&m, &q, &bounds, target).unwrap();
    let out_layer = format!("L{}.", live.len() - 1);
    for v in enc.model.vars.iter().filter(|v| v.name.starts_with(&out_layer)) {
        let n: usize = v.name[out_layer.len() + 1..].split('.').next().unwrap().parse().unwrap();
        assert!(n == target || n == q.label, "unexpected {}", v.name);
    }
}

#[test]
#[ignore]
fn fixture_modes_timing() {
    let m = load_model(MODEL).unwrap();
    let qs = load_queries(QUERIES, Duration::from_secs(60)).unwrap();
    for mode in Mode::ALL {
        for (i, q) in qs.iter().enumerate() {
            let t = Instant::now();
            let v = verify(&m, q, &VerifyConfig::with_mode(mode)).unwrap();
            println!("{mode} q{i} r={} {} {:?} {:.2}s nodes={}", q.radius, v.status, v.stage, t.elapsed().as_secs_f64(), v.ilp.nodes);
        }
    }
}
