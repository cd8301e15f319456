//! Fused quantized network description.
//!
//! Layers carry integer weights and quantization parameters. Every consumer
//! (inference, bounds, encoding, attack) works on the flattened [`Op`] list,
//! where each output neuron is a sparse list of `(input index, w − z_w)`
//! pairs; convolutions and dense layers look the same there.

use crate::error::ModelError;
use crate::quant::{DtypeBounds, QuantParams, Requant, RoundingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    /// ReLU folded into the clip: lower clip bound raised to `max(lb, z_y)`.
    ReluFused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<i64>,
    pub weight_qp: Vec<QuantParams>,
    pub weight_bounds: DtypeBounds,
    pub bias_acc: Vec<i64>,
    pub input_qp: QuantParams,
    pub output_qp: QuantParams,
    pub out_bounds: DtypeBounds,
    pub activation: Activation,
    pub fused_clip_lb: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QConvLayer {
    /// `[out_ch, in_ch, kh, kw]`
    pub kernel_shape: [usize; 4],
    /// Row-major over `kernel_shape`.
    pub kernel: Vec<i64>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    /// `[c, h, w]`
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    pub weight_qp: Vec<QuantParams>,
    pub weight_bounds: DtypeBounds,
    pub bias_acc: Vec<i64>,
    pub input_qp: QuantParams,
    pub output_qp: QuantParams,
    pub out_bounds: DtypeBounds,
    pub activation: Activation,
    pub fused_clip_lb: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolLayer {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

/// Unfused ReLU step: `y = max(x, z)` with `z` the zero point of the tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluLayer {
    pub len: usize,
    pub zero_point: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(QLinearLayer),
    Conv(QConvLayer),
    MaxPool(MaxPoolLayer),
    Relu(ReluLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "qlinear",
            Layer::Conv(_) => "qconv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Relu(_) => "relu",
        }
    }
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// One output neuron of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Neuron {
    /// `(input index, w − z_w)`, zero entries dropped.
    pub terms: Vec<(usize, i64)>,
    pub bias_acc: i64,
    pub requant: Requant,
}

/// Affine + round + clip, the fused form of one quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineOp {
    pub layer: usize,
    pub in_len: usize,
    pub input_zero: i64,
    pub output_zero: i64,
    /// Lower clip bound (already `max(lb, z_y)` for fused ReLU).
    pub clip_lo: i64,
    pub clip_hi: i64,
    pub neurons: Vec<Neuron>,
}

impl AffineOp {
    /// Integer accumulator `Σ (w − z_w)(x − z_x) + b_acc`, `None` on overflow.
    pub fn accumulate(&self, neuron: &Neuron, x: &[i64]) -> Option<i64> {
        let mut acc = neuron.bias_acc;
        for &(i, w) in &neuron.terms {
            let d = x[i].checked_sub(self.input_zero)?;
            acc = acc.checked_add(w.checked_mul(d)?)?;
        }
        Some(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolOp {
    pub layer: usize,
    pub in_len: usize,
    pub windows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluOp {
    pub layer: usize,
    pub len: usize,
    pub zero_point: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Affine(AffineOp),
    MaxPool(PoolOp),
    Relu(ReluOp),
}

impl Op {
    pub fn out_len(&self) -> usize {
        match self {
            Op::Affine(a) => a.neurons.len(),
            Op::MaxPool(p) => p.windows.len(),
            Op::Relu(r) => r.len,
        }
    }

    pub fn layer(&self) -> usize {
        match self {
            Op::Affine(a) => a.layer,
            Op::MaxPool(p) => p.layer,
            Op::Relu(r) => r.layer,
        }
    }
}

/// An immutable, validated quantized classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    input_shape: Vec<usize>,
    input_qp: QuantParams,
    input_bounds: DtypeBounds,
    rounding: RoundingMode,
    layers: Vec<Layer>,
    ops: Vec<Op>,
}

impl QuantModel {
    /// Validates the layer chain and wires each layer's input quantization to
    /// the output quantization of its predecessor.
    pub fn new(
        input_shape: Vec<usize>,
        input_qp: QuantParams,
        input_bounds: DtypeBounds,
        rounding: RoundingMode,
        mut layers: Vec<Layer>,
    ) -> Result<Self, ModelError> {
        QuantParams::new(input_qp.scale, input_qp.zero_point).map_err(|e| e.at("input_quant"))?;
        DtypeBounds::new(input_bounds.lb, input_bounds.ub).map_err(|e| e.at("input_quant"))?;
        if !input_bounds.contains(input_qp.zero_point) {
            return Err(ModelError::invariant(
                "zero_point",
                format!(
                    "zero point {} outside [{}, {}]",
                    input_qp.zero_point, input_bounds.lb, input_bounds.ub
                ),
            )
            .at("input_quant"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(ModelError::invariant("input_shape", "must be non-empty with positive extents"));
        }
        if layers.is_empty() {
            return Err(ModelError::invariant("layers", "model has no layers"));
        }

        let mut shape: Vec<usize> = input_shape.clone();
        let mut qp = input_qp;
        let mut ops = Vec::with_capacity(layers.len());
        for (k, layer) in layers.iter_mut().enumerate() {
            let loc = format!("layer {k} ({})", layer.kind());
            let len: usize = shape.iter().product();
            let op = match layer {
                Layer::Linear(l) => {
                    if l.in_dim != len {
                        return Err(ModelError::invariant(
                            "weight",
                            format!("expects {} inputs but previous layer produces {len}", l.in_dim),
                        )
                        .at(loc));
                    }
                    l.input_qp = qp;
                    check_affine(
                        &loc,
                        l.out_dim,
                        l.in_dim,
                        &l.weights,
                        &l.weight_qp,
                        l.weight_bounds,
                        &l.bias_acc,
                        l.output_qp,
                        l.out_bounds,
                    )?;
                    l.fused_clip_lb = fused_lb(l.activation, l.out_bounds, l.output_qp);
                    shape = vec![l.out_dim];
                    qp = l.output_qp;
                    Op::Affine(compile_linear(k, l).map_err(|e| e.at(&loc))?)
                }
                Layer::Conv(c) => {
                    if c.in_shape.iter().product::<usize>() != len {
                        return Err(ModelError::invariant(
                            "in_shape",
                            format!("{:?} does not match previous output of {len} values", c.in_shape),
                        )
                        .at(loc));
                    }
                    if c.kernel_shape[1] != c.in_shape[0] || c.kernel_shape[0] != c.out_shape[0] {
                        return Err(ModelError::invariant(
                            "kernel_shape",
                            format!(
                                "{:?} inconsistent with in_shape {:?} / out_shape {:?}",
                                c.kernel_shape, c.in_shape, c.out_shape
                            ),
                        )
                        .at(loc));
                    }
                    for d in 0..2 {
                        let expect =
                            conv_out_dim(c.in_shape[d + 1], c.kernel_shape[d + 2], c.stride[d], c.padding[d]);
                        if expect != Some(c.out_shape[d + 1]) {
                            return Err(ModelError::invariant(
                                "out_shape",
                                format!("{:?} inconsistent with convolution arithmetic (expected {expect:?} on axis {d})", c.out_shape),
                            )
                            .at(loc));
                        }
                    }
                    c.input_qp = qp;
                    let fan_in = c.kernel_shape[1] * c.kernel_shape[2] * c.kernel_shape[3];
                    check_affine(
                        &loc,
                        c.kernel_shape[0],
                        fan_in,
                        &c.kernel,
                        &c.weight_qp,
                        c.weight_bounds,
                        &c.bias_acc,
                        c.output_qp,
                        c.out_bounds,
                    )?;
                    c.fused_clip_lb = fused_lb(c.activation, c.out_bounds, c.output_qp);
                    shape = c.out_shape.to_vec();
                    qp = c.output_qp;
                    Op::Affine(compile_conv(k, c).map_err(|e| e.at(&loc))?)
                }
                Layer::MaxPool(p) => {
                    if p.in_shape.iter().product::<usize>() != len {
                        return Err(ModelError::invariant(
                            "in_shape",
                            format!("{:?} does not match previous output of {len} values", p.in_shape),
                        )
                        .at(loc));
                    }
                    for d in 0..2 {
                        let expect = conv_out_dim(p.in_shape[d + 1], p.kernel[d], p.stride[d], 0);
                        if expect != Some(p.out_shape[d + 1]) || p.kernel[d] == 0 {
                            return Err(ModelError::invariant(
                                "kernel",
                                format!("pooling windows do not tile input {:?}", p.in_shape),
                            )
                            .at(loc));
                        }
                    }
                    if p.out_shape[0] != p.in_shape[0] {
                        return Err(ModelError::invariant("out_shape", "channel count changed").at(loc));
                    }
                    shape = p.out_shape.to_vec();
                    Op::MaxPool(compile_pool(k, p))
                }
                Layer::Relu(r) => {
                    r.len = len;
                    r.zero_point = qp.zero_point;
                    Op::Relu(ReluOp {
                        layer: k,
                        len,
                        zero_point: qp.zero_point,
                    })
                }
            };
            ops.push(op);
        }
        Ok(QuantModel {
            input_shape,
            input_qp,
            input_bounds,
            rounding,
            layers,
            ops,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input_qp(&self) -> QuantParams {
        self.input_qp
    }

    pub fn input_bounds(&self) -> DtypeBounds {
        self.input_bounds
    }

    pub fn rounding_mode(&self) -> RoundingMode {
        self.rounding
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn num_classes(&self) -> usize {
        self.ops.last().map_or(0, Op::out_len)
    }

    /// Output quantization of the final tensor (logits).
    pub fn output_qp(&self) -> QuantParams {
        let mut qp = self.input_qp;
        for l in &self.layers {
            match l {
                Layer::Linear(x) => qp = x.output_qp,
                Layer::Conv(x) => qp = x.output_qp,
                _ => {}
            }
        }
        qp
    }

    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self, ModelError> {
        QuantModel::new(
            self.input_shape.clone(),
            self.input_qp,
            self.input_bounds,
            self.rounding,
            layers,
        )
    }

    pub fn with_rounding(&self, rounding: RoundingMode) -> Self {
        let mut m = self.clone();
        m.rounding = rounding;
        m
    }
}

fn fused_lb(act: Activation, bounds: DtypeBounds, out: QuantParams) -> i64 {
    match act {
        Activation::None => bounds.lb,
        Activation::ReluFused => bounds.lb.max(out.zero_point),
    }
}

#[allow(clippy::too_many_arguments)]
fn check_affine(
    loc: &str,
    out_dim: usize,
    fan_in: usize,
    weights: &[i64],
    weight_qp: &[QuantParams],
    weight_bounds: DtypeBounds,
    bias: &[i64],
    output_qp: QuantParams,
    out_bounds: DtypeBounds,
) -> Result<(), ModelError> {
    let fail = |field: &str, msg: String| Err(ModelError::invariant(field, msg).at(loc));
    if out_dim == 0 || fan_in == 0 {
        return fail("weight", "empty weight tensor".into());
    }
    if weights.len() != out_dim * fan_in {
        return fail(
            "weight",
            format!("{} entries, expected {out_dim}×{fan_in}", weights.len()),
        );
    }
    if weight_bounds.lb >= weight_bounds.ub {
        return fail("weight_bounds", "lb must be < ub".into());
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !weight_bounds.contains(**w)) {
        return fail(
            "weight",
            format!(
                "entry {i} = {w} outside [{}, {}]",
                weight_bounds.lb, weight_bounds.ub
            ),
        );
    }
    if weight_qp.len() != out_dim {
        return fail(
            "weight_quant",
            format!("{} entries, expected one per output ({out_dim})", weight_qp.len()),
        );
    }
    for (j, q) in weight_qp.iter().enumerate() {
        if !(q.scale.is_finite() && q.scale > 0.0) {
            return fail("weight_quant", format!("row {j}: scale must be > 0, got {}", q.scale));
        }
        if !weight_bounds.contains(q.zero_point) {
            return fail("weight_quant", format!("row {j}: zero point {} out of range", q.zero_point));
        }
    }
    if bias.len() != out_dim {
        return fail("bias_acc", format!("{} entries, expected {out_dim}", bias.len()));
    }
    if !(output_qp.scale.is_finite() && output_qp.scale > 0.0) {
        return fail("output_quant", format!("scale must be > 0, got {}", output_qp.scale));
    }
    if out_bounds.lb >= out_bounds.ub {
        return fail("output_quant", "lb must be < ub".into());
    }
    if !out_bounds.contains(output_qp.zero_point) {
        return fail(
            "output_quant",
            format!("zero point {} outside [{}, {}]", output_qp.zero_point, out_bounds.lb, out_bounds.ub),
        );
    }
    Ok(())
}

fn compile_linear(k: usize, l: &QLinearLayer) -> Result<AffineOp, ModelError> {
    let mut neurons = Vec::with_capacity(l.out_dim);
    for j in 0..l.out_dim {
        let wq = l.weight_qp[j];
        let row = &l.weights[j * l.in_dim..(j + 1) * l.in_dim];
        let terms = row
            .iter()
            .enumerate()
            .map(|(i, &w)| (i, w - wq.zero_point))
            .filter(|&(_, w)| w != 0)
            .collect();
        neurons.push(Neuron {
            terms,
            bias_acc: l.bias_acc[j],
            requant: Requant::from_scales(wq.scale, l.input_qp.scale, l.output_qp.scale)?,
        });
    }
    Ok(AffineOp {
        layer: k,
        in_len: l.in_dim,
        input_zero: l.input_qp.zero_point,
        output_zero: l.output_qp.zero_point,
        clip_lo: l.fused_clip_lb,
        clip_hi: l.out_bounds.ub,
        neurons,
    })
}

fn compile_conv(k: usize, c: &QConvLayer) -> Result<AffineOp, ModelError> {
    let [oc_n, ic_n, kh, kw] = c.kernel_shape;
    let [_, ih, iw] = c.in_shape;
    let [_, oh, ow] = c.out_shape;
    let mut requants = Vec::with_capacity(oc_n);
    for q in &c.weight_qp {
        requants.push(Requant::from_scales(q.scale, c.input_qp.scale, c.output_qp.scale)?);
    }
    let mut neurons = Vec::with_capacity(oc_n * oh * ow);
    for oc in 0..oc_n {
        let zw = c.weight_qp[oc].zero_point;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut terms = Vec::new();
                for ic in 0..ic_n {
                    for ky in 0..kh {
                        let iy = (oy * c.stride[0] + ky) as isize - c.padding[0] as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * c.stride[1] + kx) as isize - c.padding[1] as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            // Padding holds the input zero point and contributes nothing.
                            let w = c.kernel[((oc * ic_n + ic) * kh + ky) * kw + kx] - zw;
                            if w != 0 {
                                let idx = (ic * ih + iy as usize) * iw + ix as usize;
                                terms.push((idx, w));
                            }
                        }
                    }
                }
                neurons.push(Neuron {
                    terms,
                    bias_acc: c.bias_acc[oc],
                    requant: requants[oc],
                });
            }
        }
    }
    Ok(AffineOp {
        layer: k,
        in_len: c.in_shape.iter().product(),
        input_zero: c.input_qp.zero_point,
        output_zero: c.output_qp.zero_point,
        clip_lo: c.fused_clip_lb,
        clip_hi: c.out_bounds.ub,
        neurons,
    })
}

fn compile_pool(k: usize, p: &MaxPoolLayer) -> PoolOp {
    let [ch, ih, iw] = p.in_shape;
    let [_, oh, ow] = p.out_shape;
    let mut windows = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut w = Vec::with_capacity(p.kernel[0] * p.kernel[1]);
                for ky in 0..p.kernel[0] {
                    for kx in 0..p.kernel[1] {
                        let iy = oy * p.stride[0] + ky;
                        let ix = ox * p.stride[1] + kx;
                        w.push((c * ih + iy) * iw + ix);
                    }
                }
                windows.push(w);
            }
        }
    }
    PoolOp {
        layer: k,
        in_len: ch * ih * iw,
        windows,
    }
}
