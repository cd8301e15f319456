//! Quantization parameters and the integer rounding primitives shared by
//! inference, interval analysis, the ILP encoder and the attack.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    #[default]
    HalfUp,
    HalfEven,
}

/// Scale and zero point of one quantized tensor: `real = scale·(q − zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i64) -> Result<Self, ModelError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ModelError::invariant("scale", format!("scale must be > 0, got {scale}")));
        }
        Ok(QuantParams { scale, zero_point })
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }
}

/// Representable integer range of a quantized dtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtypeBounds {
    pub lb: i64,
    pub ub: i64,
}

impl DtypeBounds {
    pub const UINT8: DtypeBounds = DtypeBounds { lb: 0, ub: 255 };
    pub const INT8: DtypeBounds = DtypeBounds { lb: -128, ub: 127 };

    pub fn new(lb: i64, ub: i64) -> Result<Self, ModelError> {
        if lb >= ub {
            return Err(ModelError::invariant("bounds", format!("lb {lb} must be < ub {ub}")));
        }
        Ok(DtypeBounds { lb, ub })
    }

    pub fn contains(&self, v: i64) -> bool {
        self.lb <= v && v <= self.ub
    }

    pub fn clip(&self, v: i64) -> i64 {
        v.clamp(self.lb, self.ub)
    }
}

pub fn clip(v: i64, lo: i64, hi: i64) -> i64 {
    v.max(lo).min(hi)
}

/// Half-up or half-even rounding of a real value.
pub fn round_real(v: f64, mode: RoundingMode) -> f64 {
    let fl = v.floor();
    let frac = v - fl;
    match mode {
        RoundingMode::HalfUp => {
            if frac >= 0.5 {
                fl + 1.0
            } else {
                fl
            }
        }
        RoundingMode::HalfEven => {
            if frac > 0.5 || (frac == 0.5 && fl.rem_euclid(2.0) == 1.0) {
                fl + 1.0
            } else {
                fl
            }
        }
    }
}

/// Smallest and largest supported requantization factors. Outside this range
/// the exact rounding below would overflow 128-bit intermediates.
pub const MIN_FACTOR: f64 = 1.0 / (1u64 << 60) as f64;
pub const MAX_FACTOR: f64 = (1u64 << 20) as f64;

/// Requantization factor `f = (s_w·s_x)/s_y` of one output neuron, evaluated
/// once in that association order and then treated as the exact dyadic
/// rational `mantissa·2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Requant {
    pub factor: f64,
    mantissa: i128,
    exponent: i32,
}

impl Requant {
    pub fn from_scales(weight_scale: f64, input_scale: f64, output_scale: f64) -> Result<Self, ModelError> {
        Self::from_factor((weight_scale * input_scale) / output_scale)
    }

    pub fn from_factor(factor: f64) -> Result<Self, ModelError> {
        if !(factor.is_finite() && (MIN_FACTOR..=MAX_FACTOR).contains(&factor)) {
            return Err(ModelError::invariant(
                "scale",
                format!("requantization factor {factor:e} outside [2^-60, 2^20]"),
            ));
        }
        let (mantissa, exponent) = decompose(factor);
        Ok(Requant {
            factor,
            mantissa,
            exponent,
        })
    }

    /// `(mantissa, exponent)` with `factor = mantissa·2^exponent`, mantissa odd.
    pub fn dyadic(&self) -> (i128, i32) {
        (self.mantissa, self.exponent)
    }

    /// Real pre-round value `z_y + f·acc` in double precision (diagnostics and
    /// float paths only; integer paths use [`Requant::round`]).
    pub fn pre_round(&self, zero_point: i64, acc: i64) -> f64 {
        zero_point as f64 + self.factor * acc as f64
    }

    /// Exact `Round(z_y + f·acc)`.
    pub fn round(&self, zero_point: i64, acc: i64, mode: RoundingMode) -> i64 {
        let n = self.mantissa * acc as i128;
        if self.exponent >= 0 {
            return zero_point + (n << self.exponent) as i64;
        }
        let k = (-self.exponent) as u32;
        let denom: i128 = 1i128 << k;
        let q = n.div_euclid(denom);
        let r = n.rem_euclid(denom);
        let twice = 2 * r;
        let up = match mode {
            RoundingMode::HalfUp => twice >= denom,
            RoundingMode::HalfEven => twice > denom || (twice == denom && (q + zero_point as i128).rem_euclid(2) == 1),
        };
        zero_point + (q + up as i128) as i64
    }

    /// Smallest positive value of `y + 1/2 − z − f·acc` over integers `y` and
    /// the given accumulator range, i.e. the largest ε for which
    /// `z + f·acc − y ≤ 1/2 − ε` is equivalent to the strict `< 1/2`.
    /// `None` when the range is too wide to enumerate.
    pub fn strict_margin(&self, acc_lo: i64, acc_hi: i64, max_enumerate: u64) -> Option<f64> {
        if acc_lo > acc_hi {
            return Some(0.5);
        }
        if self.exponent >= 0 {
            // f·acc is an integer, so the distance to the next half is 1/2.
            return Some(0.5);
        }
        let k = (-self.exponent) as u32;
        let width = (acc_hi as i128 - acc_lo as i128 + 1) as u128;
        let denom: i128 = 1i128 << k;
        // f·acc mod 1 repeats with period 2^k in acc.
        let span = width.min(denom as u128);
        if span as u64 > max_enumerate {
            return None;
        }
        let half = denom >> 1;
        let mut best = denom;
        for d in 0..span as i128 {
            let acc = acc_lo as i128 + d;
            // residue of f·acc − 1/2 modulo 1, in units of 2^-k
            let r = (self.mantissa * acc - half).rem_euclid(denom);
            let gap = denom - r;
            if gap < best {
                best = gap;
            }
        }
        Some(dyadic_to_f64_down(best, k))
    }

    /// Granularity `2^min(exponent, −1)` of `f·acc − 1/2`: always a valid
    /// (if tiny) strict margin.
    pub fn grid(&self) -> f64 {
        2f64.powi(self.exponent.min(-1))
    }
}

fn decompose(x: f64) -> (i128, i32) {
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut m, mut e) = if exp_bits == 0 {
        (frac as i128, -1074)
    } else {
        ((frac | (1u64 << 52)) as i128, exp_bits - 1075)
    };
    while m != 0 && m % 2 == 0 {
        m /= 2;
        e += 1;
    }
    (m, e)
}

/// `num / 2^k` rounded toward zero into an `f64`.
fn dyadic_to_f64_down(num: i128, k: u32) -> f64 {
    let approx = num as f64 / 2f64.powi(k as i32);
    // Step down until the f64 is not above the exact value.
    let mut v = approx;
    loop {
        let (m, e) = decompose(v);
        let exact_le = if e >= -(k as i32) {
            (m << (e + k as i32)) <= num
        } else {
            // v has finer bits than 2^-k: compare num·2^(−e−k) with m.
            let shift = (-e - k as i32) as u32;
            shift >= 100 || (num << shift) >= m
        };
        if exact_le {
            return v;
        }
        v = f64::from_bits(v.to_bits() - 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_worked_example() {
        // f = 0.5·1/2 = 0.25, acc = 6, z_y = 3: 4.5 rounds up to 5.
        let rq = Requant::from_scales(0.5, 1.0, 2.0).unwrap();
        assert_eq!(rq.factor, 0.25);
        assert_eq!(rq.round(3, 6, RoundingMode::HalfUp), 5);
        assert_eq!(rq.round(3, 6, RoundingMode::HalfEven), 4);
        assert_eq!(rq.round(3, -6, RoundingMode::HalfUp), 2);
        assert_eq!(rq.round(3, -6, RoundingMode::HalfEven), 2);
    }

    #[test]
    fn exact_round_matches_real_rounding_off_ties() {
        let rq = Requant::from_factor(0.0123).unwrap();
        for acc in -5000..5000 {
            let v = rq.pre_round(7, acc);
            let frac = v - v.floor();
            if (frac - 0.5).abs() < 1e-9 {
                continue;
            }
            assert_eq!(rq.round(7, acc, RoundingMode::HalfUp), round_real(v, RoundingMode::HalfUp) as i64);
        }
    }

    #[test]
    fn strict_margin_of_quarter_factor() {
        // f = 0.25: f·acc − 1/2 hits every quarter, so the gap is 1/4.
        let rq = Requant::from_factor(0.25).unwrap();
        assert_eq!(rq.strict_margin(-100, 100, 1 << 20), Some(0.25));
        // f = 0.15 (inexact in binary) has a gap far below min(f, 1)/2.
        let rq = Requant::from_factor(0.15).unwrap();
        let m = rq.strict_margin(0, 100, 1 << 20).unwrap();
        assert!(m > 0.0 && m < 0.075, "{m}");
    }

    #[test]
    fn rejects_degenerate_scales() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(-1.0, 0).is_err());
        assert!(QuantParams::new(f64::NAN, 0).is_err());
        assert!(DtypeBounds::new(5, 5).is_err());
    }

    #[test]
    fn round_real_modes() {
        assert_eq!(round_real(2.5, RoundingMode::HalfUp), 3.0);
        assert_eq!(round_real(2.5, RoundingMode::HalfEven), 2.0);
        assert_eq!(round_real(-2.5, RoundingMode::HalfUp), -2.0);
        assert_eq!(round_real(-2.5, RoundingMode::HalfEven), -2.0);
        assert_eq!(round_real(3.5, RoundingMode::HalfEven), 4.0);
    }
}
