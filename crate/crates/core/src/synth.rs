//! Random small quantized networks for testing and benchmarking.

use std::ops::RangeInclusive;
use std::time::Duration;

use rand::Rng;

use crate::infer::predict;
use crate::model::{Activation, Layer, MaxPoolLayer, QConvLayer, QLinearLayer, QuantModel, ReluLayer};
use crate::quant::{DtypeBounds, QuantParams, RoundingMode};
use crate::query::RobustnessQuery;

/// Shape distribution of [`toy_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub inputs: RangeInclusive<usize>,
    /// Inputs lie in `[0, input_ub]`.
    pub input_ub: i64,
    pub hidden_layers: RangeInclusive<usize>,
    pub hidden_width: RangeInclusive<usize>,
    pub outputs: RangeInclusive<usize>,
    /// Probability that a hidden ReLU is a separate marker layer instead of
    /// being fused into the clip.
    pub unfused_relu: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            inputs: 2..=3,
            input_ub: 15,
            hidden_layers: 1..=2,
            hidden_width: 1..=6,
            outputs: 2..=3,
            unfused_relu: 0.25,
        }
    }
}

fn qp(scale: f64, zero_point: i64) -> QuantParams {
    QuantParams::new(scale, zero_point).expect("positive scale")
}

fn random_linear<R: Rng>(
    rng: &mut R,
    in_dim: usize,
    out_dim: usize,
    out_bounds: DtypeBounds,
    activation: Activation,
) -> QLinearLayer {
    let weights = (0..in_dim * out_dim).map(|_| rng.gen_range(-7..=7)).collect();
    let weight_qp = (0..out_dim)
        .map(|_| qp(rng.gen_range(0.02..0.3), rng.gen_range(-2..=2)))
        .collect();
    let zp = rng.gen_range(out_bounds.lb..=out_bounds.lb + (out_bounds.ub - out_bounds.lb) / 2);
    QLinearLayer {
        in_dim,
        out_dim,
        weights,
        weight_qp,
        weight_bounds: DtypeBounds::INT8,
        bias_acc: (0..out_dim).map(|_| rng.gen_range(-30..=30)).collect(),
        // Overwritten by the model constructor.
        input_qp: qp(1.0, 0),
        output_qp: qp(rng.gen_range(0.3..2.0), zp),
        out_bounds,
        activation,
        fused_clip_lb: out_bounds.lb,
    }
}

/// Dense toy network with small integer ranges everywhere, so that the
/// whole input ball can be enumerated.
pub fn toy_model<R: Rng>(rng: &mut R, cfg: &ToyConfig) -> QuantModel {
    let n_in = rng.gen_range(cfg.inputs.clone());
    let depth = rng.gen_range(cfg.hidden_layers.clone());
    let n_out = rng.gen_range(cfg.outputs.clone());
    let hidden_bounds = DtypeBounds::new(0, 15).expect("valid");
    let logit_bounds = DtypeBounds::new(-16, 15).expect("valid");
    let mut layers = Vec::new();
    let mut width = n_in;
    for _ in 0..depth {
        let w = rng.gen_range(cfg.hidden_width.clone());
        let unfused = rng.gen_bool(cfg.unfused_relu);
        let act = if unfused { Activation::None } else { Activation::ReluFused };
        layers.push(Layer::Linear(random_linear(rng, width, w, hidden_bounds, act)));
        if unfused {
            layers.push(Layer::Relu(ReluLayer { len: w, zero_point: 0 }));
        }
        width = w;
    }
    layers.push(Layer::Linear(random_linear(rng, width, n_out, logit_bounds, Activation::None)));
    QuantModel::new(
        vec![n_in],
        qp(rng.gen_range(0.05..0.5), 0),
        DtypeBounds::new(0, cfg.input_ub).expect("valid"),
        RoundingMode::HalfUp,
        layers,
    )
    .expect("toy model is valid")
}

/// Tiny convolutional network: 1×3×3 input in `[0, 7]`, a 2×2 convolution
/// with two channels, 2×2 max pooling and a dense head with two classes.
pub fn toy_conv_model<R: Rng>(rng: &mut R) -> QuantModel {
    let hidden = DtypeBounds::new(0, 15).expect("valid");
    let conv = QConvLayer {
        kernel_shape: [2, 1, 2, 2],
        kernel: (0..8).map(|_| rng.gen_range(-7..=7)).collect(),
        stride: [1, 1],
        padding: [0, 0],
        in_shape: [1, 3, 3],
        out_shape: [2, 2, 2],
        weight_qp: (0..2).map(|_| qp(rng.gen_range(0.05..0.3), rng.gen_range(-1..=1))).collect(),
        weight_bounds: DtypeBounds::INT8,
        bias_acc: (0..2).map(|_| rng.gen_range(-10..=10)).collect(),
        input_qp: qp(1.0, 0),
        output_qp: qp(rng.gen_range(0.3..1.5), rng.gen_range(0..=3)),
        out_bounds: hidden,
        activation: Activation::ReluFused,
        fused_clip_lb: 0,
    };
    let pool = MaxPoolLayer {
        kernel: [2, 2],
        stride: [2, 2],
        in_shape: [2, 2, 2],
        out_shape: [2, 1, 1],
    };
    let head = random_linear(rng, 2, 2, DtypeBounds::new(-16, 15).expect("valid"), Activation::None);
    QuantModel::new(
        vec![1, 3, 3],
        qp(rng.gen_range(0.05..0.5), 0),
        DtypeBounds::new(0, 7).expect("valid"),
        RoundingMode::HalfUp,
        vec![Layer::Conv(conv), Layer::MaxPool(pool), Layer::Linear(head)],
    )
    .expect("toy conv model is valid")
}

/// Query at a random center labelled with the model's own prediction.
pub fn random_query<R: Rng>(rng: &mut R, model: &QuantModel, radius: i64, timeout: Duration) -> RobustnessQuery {
    let b = model.input_bounds();
    let center: Vec<i64> = (0..model.input_len()).map(|_| rng.gen_range(b.lb..=b.ub)).collect();
    let label = predict(model, &center).expect("center is in range");
    RobustnessQuery::new(center, label, radius, timeout)
}

/// Every lattice point of the query's ball, in lexicographic order.
pub fn ball_points(model: &QuantModel, query: &RobustnessQuery) -> Vec<Vec<i64>> {
    let bx = query.input_box(model);
    let mut out = Vec::new();
    let mut p: Vec<i64> = bx.iter().map(|r| r.0).collect();
    loop {
        out.push(p.clone());
        let mut i = p.len();
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if p[i] < bx[i].1 {
                p[i] += 1;
                break;
            }
            p[i] = bx[i].0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_models_respect_the_shape_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ToyConfig::default();
        for _ in 0..50 {
            let m = toy_model(&mut rng, &cfg);
            assert!(cfg.inputs.contains(&m.input_len()));
            assert!(cfg.outputs.contains(&m.num_classes()));
            let q = random_query(&mut rng, &m, 1, Duration::from_secs(1));
            let n = ball_points(&m, &q).len();
            assert!((1..=27).contains(&n));
        }
    }

    #[test]
    fn conv_toy_builds() {
        let m = toy_conv_model(&mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(m.input_len(), 9);
        assert_eq!(m.num_classes(), 2);
    }
}
