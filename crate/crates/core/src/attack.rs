//! Gradient attack on a floating-point surrogate of the quantized network.
//!
//! The surrogate ("dummy net") runs the real requantization forward: inputs
//! that are integral go through the exact integer path, so its logits equal
//! integer inference. Backward treats rounding as the identity (straight
//! through), uses the clip's derivative evaluated at the unrounded value
//! (1 on `[lo, hi]` inclusive, 0 outside), passes ReLU markers where the
//! input is at least the zero point, and routes max-pool gradients to the
//! first maximal element. The attack is projected PGD with signed steps;
//! every iterate is rounded to the lattice and checked by integer inference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::VerifyError;
use crate::infer::argmax;
use crate::model::{AffineOp, Op, QuantModel};
use crate::quant::{round_real, RoundingMode};
use crate::query::{validate_counterexample, RobustnessQuery};

/// Floating-point view of a [`QuantModel`] used for gradients.
#[derive(Debug, Clone, Copy)]
pub struct DummyNet<'a> {
    model: &'a QuantModel,
}

/// Values recorded by [`DummyNet::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct DummyTrace {
    /// Output of every op, input first (rounded and clipped, as in inference).
    pub acts: Vec<Vec<f64>>,
    /// Unrounded requantized value `z_y + f·acc` of every affine neuron
    /// (empty for non-affine ops).
    pub pre: Vec<Vec<f64>>,
}

impl DummyTrace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("input is always present")
    }
}

pub fn build_dummy(model: &QuantModel) -> DummyNet<'_> {
    DummyNet { model }
}

fn is_integral(x: &[f64]) -> bool {
    x.iter().all(|v| v.fract() == 0.0 && v.abs() < 9.0e15)
}

fn affine_real(op: &AffineOp, x: &[f64], mode: RoundingMode) -> (Vec<f64>, Vec<f64>) {
    let exact = is_integral(x);
    let mut pre = Vec::with_capacity(op.neurons.len());
    let mut out = Vec::with_capacity(op.neurons.len());
    let xi: Vec<i64> = if exact { x.iter().map(|&v| v as i64).collect() } else { Vec::new() };
    for n in &op.neurons {
        let acc_real: f64 = n.bias_acc as f64
            + n.terms
                .iter()
                .map(|&(i, w)| w as f64 * (x[i] - op.input_zero as f64))
                .sum::<f64>();
        let p = op.output_zero as f64 + n.requant.factor * acc_real;
        let rounded = match exact.then(|| op.accumulate(n, &xi)).flatten() {
            Some(acc) => n.requant.round(op.output_zero, acc, mode) as f64,
            None => round_real(p, mode),
        };
        pre.push(p);
        out.push(rounded.clamp(op.clip_lo as f64, op.clip_hi as f64));
    }
    (pre, out)
}

impl DummyNet<'_> {
    pub fn forward(&self, x: &[f64]) -> DummyTrace {
        let mode = self.model.rounding_mode();
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.model.ops().len());
        for op in self.model.ops() {
            let prev = acts.last().expect("non-empty");
            let (p, next) = match op {
                Op::Affine(a) => affine_real(a, prev, mode),
                Op::MaxPool(pool) => (
                    Vec::new(),
                    pool.windows
                        .iter()
                        .map(|w| w.iter().map(|&i| prev[i]).fold(f64::NEG_INFINITY, f64::max))
                        .collect(),
                ),
                Op::Relu(r) => (Vec::new(), prev.iter().map(|&v| v.max(r.zero_point as f64)).collect()),
            };
            pre.push(p);
            acts.push(next);
        }
        DummyTrace { acts, pre }
    }

    /// Cross-entropy of `softmax(s_y·(o − z_y))` against `label`, and its
    /// gradient with respect to the logits `o`.
    pub fn loss_and_grad(&self, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
        let qp = self.model.output_qp();
        let z: Vec<f64> = logits.iter().map(|&o| qp.scale * (o - qp.zero_point as f64)).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = -(z[label] - m - sum.ln());
        let grad = exps
            .iter()
            .enumerate()
            .map(|(i, e)| qp.scale * (e / sum - if i == label { 1.0 } else { 0.0 }))
            .collect();
        (loss, grad)
    }

    /// Straight-through gradient of the loss with respect to the input.
    pub fn backward(&self, trace: &DummyTrace, label: usize) -> (f64, Vec<f64>) {
        let (loss, mut g) = self.loss_and_grad(trace.logits(), label);
        for (k, op) in self.model.ops().iter().enumerate().rev() {
            let input = &trace.acts[k];
            let mut gin = vec![0.0; input.len()];
            match op {
                Op::Affine(a) => {
                    for (j, n) in a.neurons.iter().enumerate() {
                        let p = trace.pre[k][j];
                        if g[j] == 0.0 || p < a.clip_lo as f64 || p > a.clip_hi as f64 {
                            continue;
                        }
                        let s = g[j] * n.requant.factor;
                        for &(i, w) in &n.terms {
                            gin[i] += s * w as f64;
                        }
                    }
                }
                Op::MaxPool(pool) => {
                    for (j, w) in pool.windows.iter().enumerate() {
                        let mut best = w[0];
                        for &i in &w[1..] {
                            if input[i] > input[best] {
                                best = i;
                            }
                        }
                        gin[best] += g[j];
                    }
                }
                Op::Relu(r) => {
                    for (j, &v) in input.iter().enumerate() {
                        if v >= r.zero_point as f64 {
                            gin[j] = g[j];
                        }
                    }
                }
            }
            g = gin;
        }
        (loss, g)
    }

    pub fn forward_backward(&self, x: &[f64], label: usize) -> (DummyTrace, f64, Vec<f64>) {
        let trace = self.forward(x);
        let (loss, grad) = self.backward(&trace, label);
        (trace, loss, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step size; `None` means `radius / steps`.
    pub step_size: Option<f64>,
    /// Number of starts; the first starts at the center, the rest at seeded
    /// random lattice points in the ball.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 7,
            step_size: None,
            restarts: 1,
            seed: 0,
        }
    }
}

/// Projected gradient ascent on the cross-entropy loss. Returns a validated
/// counterexample or `None` (which proves nothing).
pub fn pgd_attack(
    model: &QuantModel,
    query: &RobustnessQuery,
    config: &AttackConfig,
    deadline: Option<Instant>,
) -> Result<Option<Vec<i64>>, VerifyError> {
    query.validate(model)?;
    let net = build_dummy(model);
    let bounds = query.input_box(model);
    let center: Vec<f64> = query.center.data.iter().map(|&v| v as f64).collect();
    if validate_counterexample(model, query, &query.center.data) {
        return Ok(Some(query.center.data.clone()));
    }
    if query.radius == 0 || config.steps == 0 {
        return Ok(None);
    }
    let alpha = config.step_size.unwrap_or(query.radius as f64 / config.steps as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for restart in 0..config.restarts.max(1) {
        let mut x: Vec<f64> = if restart == 0 {
            center.clone()
        } else {
            bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi) as f64).collect()
        };
        for _ in 0..config.steps {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Ok(None);
            }
            let point: Vec<f64> = x.iter().map(|&v| round_real(v, RoundingMode::HalfUp)).collect();
            let (_, _, grad) = net.forward_backward(&point, query.label);
            for ((v, g), &(lo, hi)) in x.iter_mut().zip(&grad).zip(&bounds) {
                let step = if *g > 0.0 {
                    alpha
                } else if *g < 0.0 {
                    -alpha
                } else {
                    0.0
                };
                *v = (*v + step).clamp(lo as f64, hi as f64);
            }
            let cand: Vec<i64> = x
                .iter()
                .zip(&bounds)
                .map(|(&v, &(lo, hi))| (round_real(v, RoundingMode::HalfUp) as i64).clamp(lo, hi))
                .collect();
            if validate_counterexample(model, query, &cand) {
                return Ok(Some(cand));
            }
        }
    }
    Ok(None)
}

/// Label predicted by the surrogate on an integer input (equals integer
/// inference).
pub fn dummy_predict(model: &QuantModel, x: &[i64]) -> usize {
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let t = build_dummy(model).forward(&xf);
    let logits: Vec<i64> = t.logits().iter().map(|&v| v as i64).collect();
    argmax(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer, MaxPoolLayer, QLinearLayer, ReluLayer};
    use crate::quant::{DtypeBounds, QuantParams};
    use rand::SeedableRng;

    fn qp(scale: f64, zero_point: i64) -> QuantParams {
        QuantParams::new(scale, zero_point).unwrap()
    }

    /// y = Clip(Round(z + f·(w·x)), [0, 255]) with one output per weight row.
    fn linear(rows: Vec<Vec<i64>>, out: QuantParams, act: Activation) -> Layer {
        let (out_dim, in_dim) = (rows.len(), rows[0].len());
        Layer::Linear(QLinearLayer {
            in_dim,
            out_dim,
            weights: rows.concat(),
            weight_qp: vec![qp(1.0, 0); out_dim],
            weight_bounds: DtypeBounds::INT8,
            bias_acc: vec![0; out_dim],
            input_qp: qp(1.0, 0),
            output_qp: out,
            out_bounds: DtypeBounds::UINT8,
            activation: act,
            fused_clip_lb: 0,
        })
    }

    #[test]
    fn loss_gradient_sums_to_zero() {
        let model = crate::synth::toy_model(&mut ChaCha8Rng::seed_from_u64(3), &Default::default());
        let net = build_dummy(&model);
        let n = model.num_classes();
        let logits: Vec<f64> = (0..n).map(|i| 3.0 * i as f64).collect();
        let (loss, g) = net.loss_and_grad(&logits, 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[1] < 0.0);
    }

    #[test]
    fn gradient_passes_at_clip_and_relu_kinks() {
        // Hidden neuron: pre-round value x − 10 with z_y = 0, so x = 10 sits
        // exactly on the clip floor; the marker ReLU then sees 0 = z.
        let model = QuantModel::new(
            vec![1],
            qp(1.0, 0),
            DtypeBounds::UINT8,
            RoundingMode::HalfUp,
            vec![
                Layer::Linear(QLinearLayer {
                    bias_acc: vec![-10],
                    ..match linear(vec![vec![1]], qp(1.0, 0), Activation::None) {
                        Layer::Linear(l) => l,
                        _ => unreachable!(),
                    }
                }),
                Layer::Relu(ReluLayer { len: 1, zero_point: 0 }),
                linear(vec![vec![1], vec![-1]], qp(1.0, 100), Activation::None),
            ],
        )
        .unwrap();
        let net = build_dummy(&model);
        let (trace, _, g) = net.forward_backward(&[10.0], 1);
        assert_eq!(trace.pre[0], vec![0.0]);
        assert!(g[0] != 0.0, "kinks must pass the interior derivative");
        let (_, _, g_below) = net.forward_backward(&[9.0], 1);
        assert_eq!(g_below[0], 0.0);
    }

    #[test]
    fn maxpool_routes_to_first_maximum() {
        let model = QuantModel::new(
            vec![1, 2, 2],
            qp(1.0, 0),
            DtypeBounds::UINT8,
            RoundingMode::HalfUp,
            vec![
                Layer::MaxPool(MaxPoolLayer {
                    kernel: [2, 2],
                    stride: [2, 2],
                    in_shape: [1, 2, 2],
                    out_shape: [1, 1, 1],
                }),
                linear(vec![vec![1], vec![-1]], qp(1.0, 100), Activation::None),
            ],
        )
        .unwrap();
        let (_, _, g) = build_dummy(&model).forward_backward(&[3.0, 7.0, 7.0, 1.0], 0);
        assert!(g[1] != 0.0);
        assert_eq!((g[0], g[2], g[3]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn exact_mode_matches_integer_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let model = crate::synth::toy_model(&mut rng, &Default::default());
            let x: Vec<i64> = (0..model.input_len()).map(|_| rng.gen_range(0..=15)).collect();
            assert_eq!(dummy_predict(&model, &x), crate::infer::predict(&model, &x).unwrap());
        }
    }

    #[test]
    fn pgd_finds_counterexample_on_boundary_point() {
        // One input, two classes: o = (15, 2x), so class 1 wins iff x ≥ 8.
        let model = QuantModel::new(
            vec![1],
            qp(1.0, 0),
            DtypeBounds::new(0, 15).unwrap(),
            RoundingMode::HalfUp,
            vec![Layer::Linear(QLinearLayer {
                bias_acc: vec![0, -15],
                ..match linear(vec![vec![0], vec![2]], qp(1.0, 15), Activation::None) {
                    Layer::Linear(l) => l,
                    _ => unreachable!(),
                }
            })],
        )
        .unwrap();
        let q = RobustnessQuery::new(vec![7], 0, 1, std::time::Duration::from_secs(1));
        assert_eq!(crate::infer::predict(&model, &[7]).unwrap(), 0);
        let x = pgd_attack(&model, &q, &AttackConfig::default(), None).unwrap().unwrap();
        assert!(validate_counterexample(&model, &q, &x));
        let far = RobustnessQuery::new(vec![2], 0, 1, std::time::Duration::from_secs(1));
        assert_eq!(pgd_attack(&model, &far, &AttackConfig::default(), None).unwrap(), None);
    }
}
