//! Layer fusion passes: affine + batch norm (real-valued, exporter side) and
//! affine + ReLU (quantized, raises the clip floor to the output zero point).

use crate::error::ModelError;
use crate::model::{Activation, Layer, QuantModel};

/// Per-channel inference-time batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<(), ModelError> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(ModelError::invariant("batch_norm", "per-channel vectors differ in length"));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(ModelError::invariant("running_var", "must be >= 0"));
        }
        if !(self.eps >= 0.0) {
            return Err(ModelError::invariant("eps", "must be >= 0"));
        }
        Ok(())
    }
}

/// Real-valued affine layer `y = W x + b`, one weight row per output channel.
/// Convolution kernels fit by flattening each output channel's filter.
#[derive(Debug, Clone, PartialEq)]
pub struct RealAffine {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl RealAffine {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// `BN(W x + b)` as one affine map: `W' = diag(γ/√(σ²+ε)) W`,
/// `b' = γ(b − μ)/√(σ²+ε) + β`.
pub fn fuse_batchnorm(layer: &RealAffine, bn: &BatchNormParams) -> Result<RealAffine, ModelError> {
    bn.validate()?;
    if bn.channels() != layer.weights.len() || layer.bias.len() != layer.weights.len() {
        return Err(ModelError::ChannelMismatch {
            layer: layer.weights.len(),
            bn: bn.channels(),
        });
    }
    let mut weights = Vec::with_capacity(layer.weights.len());
    let mut bias = Vec::with_capacity(layer.bias.len());
    for c in 0..bn.channels() {
        let denom = (bn.running_var[c] + bn.eps).sqrt();
        if denom == 0.0 {
            return Err(ModelError::invariant("eps", format!("channel {c} has zero variance and eps")));
        }
        let k = bn.gamma[c] / denom;
        weights.push(layer.weights[c].iter().map(|w| k * w).collect());
        bias.push(k * (layer.bias[c] - bn.running_mean[c]) + bn.beta[c]);
    }
    Ok(RealAffine { weights, bias })
}

/// Folds a following ReLU into the layer's clip. No-op on already fused
/// layers and on pooling/ReLU layers.
pub fn fuse_relu(layer: &Layer) -> Layer {
    let mut out = layer.clone();
    match &mut out {
        Layer::Linear(l) => {
            l.activation = Activation::ReluFused;
            l.fused_clip_lb = l.out_bounds.lb.max(l.output_qp.zero_point);
        }
        Layer::Conv(c) => {
            c.activation = Activation::ReluFused;
            c.fused_clip_lb = c.out_bounds.lb.max(c.output_qp.zero_point);
        }
        Layer::MaxPool(_) | Layer::Relu(_) => {}
    }
    out
}

/// Merges every `affine(activation = none), relu` pair of the model.
pub fn fuse_relus(model: &QuantModel) -> Result<QuantModel, ModelError> {
    let mut layers = Vec::with_capacity(model.layers().len());
    let mut iter = model.layers().iter().peekable();
    while let Some(l) = iter.next() {
        let unfused_affine = matches!(
            l,
            Layer::Linear(x) if x.activation == Activation::None
        ) || matches!(l, Layer::Conv(x) if x.activation == Activation::None);
        if unfused_affine && matches!(iter.peek(), Some(Layer::Relu(_))) {
            iter.next();
            layers.push(fuse_relu(l));
        } else {
            layers.push(l.clone());
        }
    }
    model.with_layers(layers)
}
