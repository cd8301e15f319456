//! Bit-exact integer inference.

use serde::{Deserialize, Serialize};

use crate::error::InferenceError;
use crate::model::{AffineOp, Op, PoolOp, QuantModel, ReluOp};
use crate::quant::{clip, round_real, DtypeBounds, QuantParams, RoundingMode};

/// Row-major integer tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>) -> Option<Self> {
        (shape.iter().product::<usize>() == data.len()).then_some(IntTensor { shape, data })
    }

    pub fn flat(data: Vec<i64>) -> Self {
        IntTensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `Clip(Round(γ/s + z), lb, ub)` per entry.
pub fn quantize_input(x: &[f64], qp: QuantParams, bounds: DtypeBounds, mode: RoundingMode) -> IntTensor {
    let data = x
        .iter()
        .map(|&g| {
            let q = round_real(g / qp.scale + qp.zero_point as f64, mode);
            q.clamp(bounds.lb as f64, bounds.ub as f64) as i64
        })
        .collect();
    IntTensor::flat(data)
}

/// Intermediate values of one affine neuron, for cross-checking the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeuronTrace {
    pub acc: i64,
    pub rounded: i64,
    pub clipped: i64,
}

pub fn affine_forward(
    op: &AffineOp,
    x: &[i64],
    mode: RoundingMode,
) -> Result<Vec<i64>, InferenceError> {
    affine_trace(op, x, mode).map(|t| t.into_iter().map(|n| n.clipped).collect())
}

pub fn affine_trace(
    op: &AffineOp,
    x: &[i64],
    mode: RoundingMode,
) -> Result<Vec<NeuronTrace>, InferenceError> {
    op.neurons
        .iter()
        .enumerate()
        .map(|(j, n)| {
            let acc = op.accumulate(n, x).ok_or(InferenceError::Overflow {
                layer: op.layer,
                neuron: j,
            })?;
            let rounded = n.requant.round(op.output_zero, acc, mode);
            Ok(NeuronTrace {
                acc,
                rounded,
                clipped: clip(rounded, op.clip_lo, op.clip_hi),
            })
        })
        .collect()
}

pub fn pool_forward(op: &PoolOp, x: &[i64]) -> Vec<i64> {
    op.windows
        .iter()
        .map(|w| w.iter().map(|&i| x[i]).max().expect("non-empty window"))
        .collect()
}

pub fn relu_forward(op: &ReluOp, x: &[i64]) -> Vec<i64> {
    x.iter().map(|&v| v.max(op.zero_point)).collect()
}

pub fn op_forward(op: &Op, x: &[i64], mode: RoundingMode) -> Result<Vec<i64>, InferenceError> {
    match op {
        Op::Affine(a) => affine_forward(a, x, mode),
        Op::MaxPool(p) => Ok(pool_forward(p, x)),
        Op::Relu(r) => Ok(relu_forward(r, x)),
    }
}

fn check_input(model: &QuantModel, x: &[i64]) -> Result<(), InferenceError> {
    if x.len() != model.input_len() {
        return Err(InferenceError::InputShape {
            expected: model.input_len(),
            got: x.len(),
        });
    }
    let b = model.input_bounds();
    if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !b.contains(**v)) {
        return Err(InferenceError::InputRange {
            index,
            value,
            lb: b.lb,
            ub: b.ub,
        });
    }
    Ok(())
}

/// Outputs of every op, input first.
pub fn forward_all(model: &QuantModel, x: &[i64]) -> Result<Vec<Vec<i64>>, InferenceError> {
    check_input(model, x)?;
    let mode = model.rounding_mode();
    let mut acts = Vec::with_capacity(model.ops().len() + 1);
    acts.push(x.to_vec());
    for op in model.ops() {
        let next = op_forward(op, acts.last().expect("non-empty"), mode)?;
        acts.push(next);
    }
    Ok(acts)
}

/// Integer logits.
pub fn forward(model: &QuantModel, x: &[i64]) -> Result<Vec<i64>, InferenceError> {
    Ok(forward_all(model, x)?.pop().expect("at least the input"))
}

/// Argmax with ties broken toward the smallest index.
pub fn argmax(logits: &[i64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &QuantModel, x: &[i64]) -> Result<usize, InferenceError> {
    forward(model, x).map(|o| argmax(&o))
}
