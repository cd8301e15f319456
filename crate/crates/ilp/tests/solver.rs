use std::time::Duration;

use proptest::prelude::*;
use qnnv_ilp::{
    parse_lp, solve_ilp, write_lp, Comparator, IlpModel, LinConstraint, SolveResult, SolveStatus,
    SolverConfig, VarId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small random model whose box can be enumerated. Coefficients include
/// non-integral values so that tolerances in the relaxation are exercised.
fn random_model(rng: &mut ChaCha8Rng) -> IlpModel {
    let mut m = IlpModel::new();
    let n = rng.gen_range(1..=4);
    let mut ids = Vec::new();
    for i in 0..n {
        if rng.gen_bool(0.3) {
            ids.push(m.add_binary(format!("b{i}")));
        } else {
            let lo = rng.gen_range(-4..=2);
            let hi = lo + rng.gen_range(0..=5);
            ids.push(m.add_integer(format!("x{i}"), lo, hi));
        }
    }
    for _ in 0..rng.gen_range(1..=4) {
        let mut terms: Vec<(VarId, f64)> = Vec::new();
        for &v in &ids {
            if !rng.gen_bool(0.7) {
                continue;
            }
            let c = if rng.gen_bool(0.2) {
                rng.gen_range(-30..=30) as f64 / 4.0
            } else {
                rng.gen_range(-5..=5) as f64
            };
            if c != 0.0 {
                terms.push((v, c));
            }
        }
        if terms.is_empty() {
            continue;
        }
        let rhs = rng.gen_range(-40..=40) as f64 / 4.0;
        let cmp = match rng.gen_range(0..5) {
            0 => Comparator::Eq,
            1 | 2 => Comparator::Le,
            _ => Comparator::Ge,
        };
        m.add_constraint(LinConstraint::new(terms, cmp, rhs));
    }
    m
}

fn enumerate_feasible(m: &IlpModel) -> bool {
    let bounds: Vec<(i64, i64)> = m.vars.iter().map(|v| (v.lo, v.hi)).collect();
    let mut p: Vec<i64> = bounds.iter().map(|b| b.0).collect();
    loop {
        if m.is_feasible_point(&p) {
            return true;
        }
        let mut i = p.len();
        loop {
            if i == 0 {
                return false;
            }
            i -= 1;
            if p[i] < bounds[i].1 {
                p[i] += 1;
                break;
            }
            p[i] = bounds[i].0;
        }
    }
}

fn check_against_enumeration(m: &IlpModel, cfg: &SolverConfig) {
    let r = solve_ilp(m, cfg).unwrap();
    let expected = enumerate_feasible(m);
    match r.status {
        SolveStatus::Feasible => {
            assert!(expected, "solver found a point the enumeration missed");
            assert!(m.is_feasible_point(r.witness.as_ref().unwrap()));
        }
        SolveStatus::Infeasible => assert!(!expected, "solver missed a feasible point"),
        SolveStatus::Timeout => panic!("tiny model timed out"),
    }
}

#[test]
fn agrees_with_enumeration_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut feasible = 0;
    for _ in 0..400 {
        let m = random_model(&mut rng);
        feasible += enumerate_feasible(&m) as usize;
        check_against_enumeration(&m, &SolverConfig::default());
    }
    // Both outcomes must be represented for the comparison to mean anything.
    assert!(feasible > 40 && feasible < 360, "feasible = {feasible}");
}

#[test]
fn agrees_without_bound_propagation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = SolverConfig {
        bound_propagation: false,
        restart_interval: 3,
        ..SolverConfig::default()
    };
    for _ in 0..300 {
        check_against_enumeration(&random_model(&mut rng), &cfg);
    }
}

#[test]
fn lp_text_round_trip_preserves_answers() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let m = random_model(&mut rng);
        let back = parse_lp(&write_lp(&m)).unwrap();
        assert_eq!(back.num_vars(), m.num_vars());
        assert_eq!(back.num_binaries(), m.num_binaries());
        assert_eq!(enumerate_feasible(&back), enumerate_feasible(&m));
    }
}

#[test]
fn parity_knapsack_needs_branching() {
    // Σ 2·x_i = 2k + 1 is LP-feasible at every node but has no integer point.
    let mut m = IlpModel::new();
    let xs: Vec<VarId> = (0..6).map(|i| m.add_integer(format!("x{i}"), 0, 3)).collect();
    m.add_constraint(LinConstraint::eq(xs.iter().map(|&x| (x, 2.0)).collect(), 9.0));
    let r = solve_ilp(&m, &SolverConfig::with_timeout(Duration::from_secs(30))).unwrap();
    assert_eq!(r.status, SolveStatus::Infeasible);
    assert!(r.stats.nodes >= 1);
}

#[test]
fn result_serializes_with_status_names() {
    let mut m = IlpModel::new();
    let x = m.add_integer("x", 0, 3);
    m.add_constraint(LinConstraint::eq(vec![(x, 1.0)], 2.0));
    let r = solve_ilp(&m, &SolverConfig::default()).unwrap();
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["status"], "FEASIBLE");
    assert_eq!(json["witness"], serde_json::json!([2]));
    let back: SolveResult = serde_json::from_value(json).unwrap();
    assert_eq!(back.witness, Some(vec![2]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn single_row_matches_enumeration(
        coeffs in prop::collection::vec(-6i64..=6, 1..=3),
        rhs in -20i64..=20,
        hi in 0i64..=4,
        eq in any::<bool>(),
    ) {
        let mut m = IlpModel::new();
        let terms: Vec<(VarId, f64)> = coeffs
            .iter()
            .enumerate()
            .map(|(i, &c)| (m.add_integer(format!("x{i}"), -hi, hi), c as f64))
            .collect();
        let cmp = if eq { Comparator::Eq } else { Comparator::Le };
        m.add_constraint(LinConstraint::new(terms, cmp, rhs as f64));
        let r = solve_ilp(&m, &SolverConfig::default()).unwrap();
        prop_assert_eq!(r.status == SolveStatus::Feasible, enumerate_feasible(&m));
        if let Some(w) = r.witness {
            prop_assert!(m.is_feasible_point(&w));
        }
    }
}
