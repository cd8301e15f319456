//! Exact re-checking of integer points.
//!
//! Every `f64` is a dyadic rational, so constraint activities can be summed
//! without error in big rationals. The solver only reports a witness after it
//! passes this check; LP tolerances never decide feasibility.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;

use crate::model::{Comparator, IlpModel, LinConstraint};

pub fn to_rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite coefficient")
}

/// Exact value of `Σ coef·x` for an integer point.
pub fn exact_activity(c: &LinConstraint, point: &[i64]) -> BigRational {
    let mut acc = BigRational::zero();
    for &(v, coef) in &c.terms {
        if coef == 0.0 {
            continue;
        }
        acc += to_rational(coef) * BigRational::from_integer(BigInt::from(point[v.0]));
    }
    acc
}

pub fn constraint_holds(c: &LinConstraint, point: &[i64]) -> bool {
    let lhs = exact_activity(c, point);
    let rhs = to_rational(c.rhs);
    match c.cmp {
        Comparator::Le => lhs <= rhs,
        Comparator::Ge => lhs >= rhs,
        Comparator::Eq => lhs == rhs,
    }
}

/// Returns the index of the first violated constraint (or bound, reported as
/// `usize::MAX`) if the point is infeasible.
pub fn check_point(model: &IlpModel, point: &[i64]) -> Result<(), usize> {
    if point.len() != model.vars.len() {
        return Err(usize::MAX);
    }
    for (v, &x) in model.vars.iter().zip(point) {
        if x < v.lo || x > v.hi {
            return Err(usize::MAX);
        }
    }
    // Cheap floating filter first; only near-boundary rows pay for bignums.
    for (i, c) in model.constraints.iter().enumerate() {
        let mut act = 0.0;
        let mut mag = 0.0;
        for &(v, coef) in &c.terms {
            let t = coef * point[v.0] as f64;
            act += t;
            mag += t.abs();
        }
        let scale = 1.0 + c.rhs.abs() + mag;
        let slack = match c.cmp {
            Comparator::Le => c.rhs - act,
            Comparator::Ge => act - c.rhs,
            Comparator::Eq => -(act - c.rhs).abs(),
        };
        if slack > 1e-9 * scale {
            continue;
        }
        if slack < -1e-6 * scale || !constraint_holds(c, point) {
            return Err(i);
        }
    }
    Ok(())
}
