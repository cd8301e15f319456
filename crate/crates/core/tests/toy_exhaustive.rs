use std::time::Duration;

use qnnv_core::pipeline::{verify, Mode, Status, VerifyConfig};
use qnnv_core::synth::{ball_points, random_query, toy_conv_model, toy_model, ToyConfig};
use qnnv_core::{predict, validate_counterexample, QuantModel, RobustnessQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force_robust(model: &QuantModel, q: &RobustnessQuery) -> bool {
    ball_points(model, q)
        .iter()
        .all(|x| predict(model, x).unwrap() == q.label)
}

fn check(model: &QuantModel, q: &RobustnessQuery) {
    let truth = brute_force_robust(model, q);
    for mode in Mode::ALL {
        let v = verify(model, q, &VerifyConfig::with_mode(mode)).unwrap();
        let want = if truth { Status::Robust } else { Status::Unsafe };
        assert_eq!(v.status, want, "mode {mode}, query {q:?}, model {model:?}");
        if let Some(x) = &v.counterexample {
            assert!(validate_counterexample(model, q, x));
        }
    }
}

#[test]
fn dense_toys_agree_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ToyConfig::default();
    for _ in 0..60 {
        let m = toy_model(&mut rng, &cfg);
        let r = rng.gen_range(1..=2);
        let q = random_query(&mut rng, &m, r, Duration::from_secs(30));
        check(&m, &q);
    }
}

#[test]
fn conv_pool_toys_agree_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..15 {
        let m = toy_conv_model(&mut rng);
        let q = random_query(&mut rng, &m, 1, Duration::from_secs(30));
        check(&m, &q);
    }
}
