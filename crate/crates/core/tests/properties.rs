use std::time::Duration;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::FromPrimitive;
use proptest::prelude::*;
use qnnv_core::interval::analyze;
use qnnv_core::synth::{ball_points, random_query, toy_model, ToyConfig};
use qnnv_core::{forward, load_model, save_model, Requant, RoundingMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn exact(f: f64) -> BigRational {
    BigRational::from_f64(f).expect("finite")
}

/// Half-up rounding of `z + f·acc` computed with unbounded rationals.
fn half_up(f: f64, z: i64, acc: i64) -> i64 {
    let v = exact(f) * BigRational::from_integer(BigInt::from(acc)) + BigRational::new(1.into(), 2.into());
    let fl = v.floor().to_integer();
    z + i64::try_from(fl).unwrap()
}

fn factor() -> impl Strategy<Value = f64> {
    (1u64..(1 << 20), -30i32..=4).prop_map(|(m, e)| m as f64 * 2f64.powi(e - 20))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn requantization_matches_rational_rounding(f in factor(), z in -128i64..=127, acc in -100_000i64..=100_000) {
        let rq = Requant::from_factor(f).unwrap();
        prop_assert_eq!(rq.round(z, acc, RoundingMode::HalfUp), half_up(f, z, acc));
    }

    #[test]
    fn strict_margin_never_exceeds_realised_gap(f in factor(), lo in -3000i64..=3000, w in 0i64..=500) {
        let rq = Requant::from_factor(f).unwrap();
        let Some(eps) = rq.strict_margin(lo, lo + w, 1 << 22) else {
            return Ok(());
        };
        prop_assert!(eps > 0.0);
        let eps = exact(eps);
        let half = BigRational::new(1.into(), 2.into());
        for acc in lo..=lo + w {
            let y = BigRational::from_integer(BigInt::from(half_up(f, 0, acc)));
            let gap = y + &half - exact(f) * BigRational::from_integer(BigInt::from(acc));
            prop_assert!(gap >= eps, "acc {acc}: gap below margin");
        }
    }

    #[test]
    fn interval_bounds_contain_every_reachable_logit(seed in any::<u64>(), radius in 1i64..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = toy_model(&mut rng, &ToyConfig::default());
        let q = random_query(&mut rng, &model, radius, Duration::from_secs(5));
        let logits = analyze(&model, &q).unwrap().bounds.logits();
        for x in ball_points(&model, &q) {
            for (y, r) in forward(&model, &x).unwrap().iter().zip(&logits) {
                prop_assert!(r.contains(*y), "logit {y} outside [{}, {}]", r.lo, r.hi);
            }
        }
    }

    #[test]
    fn saved_model_reloads_with_identical_outputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = toy_model(&mut rng, &ToyConfig::default());
        let back = load_model(save_model(&model).as_bytes()).unwrap();
        let q = random_query(&mut rng, &model, 2, Duration::from_secs(5));
        for x in ball_points(&model, &q) {
            prop_assert_eq!(forward(&model, &x).unwrap(), forward(&back, &x).unwrap());
        }
    }
}
