//! JSON model file (format version 1).
//!
//! Scales are decimal strings so that every component parses the identical
//! `f64`; writing uses the shortest round-trip representation.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{
    Activation, Layer, MaxPoolLayer, QConvLayer, QLinearLayer, QuantModel, ReluLayer,
};
use crate::quant::{DtypeBounds, QuantParams, RoundingMode};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub input_quant: TensorQuantJson,
    #[serde(default)]
    pub rounding_mode: RoundingMode,
    pub layers: Vec<LayerJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorQuantJson {
    pub scale: String,
    pub zero_point: i64,
    pub lb: i64,
    pub ub: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightQuantJson {
    pub scale: String,
    pub zero_point: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationJson {
    None,
    Relu,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerJson {
    Qlinear {
        weight: Vec<Vec<i64>>,
        weight_quant: Vec<WeightQuantJson>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight_bounds: Option<DtypeBounds>,
        bias_acc: Vec<i64>,
        output_quant: TensorQuantJson,
        activation: ActivationJson,
    },
    Qconv {
        /// `[out_ch][in_ch][kh][kw]`
        weight: Vec<Vec<Vec<Vec<i64>>>>,
        weight_quant: Vec<WeightQuantJson>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight_bounds: Option<DtypeBounds>,
        bias_acc: Vec<i64>,
        output_quant: TensorQuantJson,
        activation: ActivationJson,
        stride: [usize; 2],
        padding: [usize; 2],
        kernel_shape: [usize; 4],
        in_shape: [usize; 3],
        out_shape: [usize; 3],
    },
    Maxpool {
        kernel: [usize; 2],
        stride: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_shape: Option<[usize; 3]>,
    },
    /// Unfused ReLU following a layer whose activation is `none`.
    Relu,
}

fn parse_scale(s: &str, field: &str) -> Result<f64, ModelError> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| ModelError::invariant(field, format!("scale {s:?} is not a decimal number: {e}")))
}

fn tensor_quant(q: &TensorQuantJson, field: &str) -> Result<(QuantParams, DtypeBounds), ModelError> {
    let scale = parse_scale(&q.scale, field)?;
    let qp = QuantParams::new(scale, q.zero_point).map_err(|e| retag(e, field))?;
    let b = DtypeBounds::new(q.lb, q.ub).map_err(|e| retag(e, field))?;
    if !b.contains(q.zero_point) {
        return Err(ModelError::invariant(
            field,
            format!("zero point {} outside [{}, {}]", q.zero_point, q.lb, q.ub),
        ));
    }
    Ok((qp, b))
}

fn retag(e: ModelError, field: &str) -> ModelError {
    match e {
        ModelError::Invariant { msg, .. } => ModelError::invariant(field, msg),
        other => other,
    }
}

fn weight_quants(ws: &[WeightQuantJson]) -> Result<Vec<QuantParams>, ModelError> {
    ws.iter()
        .enumerate()
        .map(|(j, w)| {
            let scale = parse_scale(&w.scale, "weight_quant")?;
            if !(scale.is_finite() && scale > 0.0) {
                return Err(ModelError::invariant(
                    "weight_quant",
                    format!("row {j}: scale must be > 0, got {scale}"),
                ));
            }
            Ok(QuantParams {
                scale,
                zero_point: w.zero_point,
            })
        })
        .collect()
}

fn activation(a: ActivationJson) -> Activation {
    match a {
        ActivationJson::None => Activation::None,
        ActivationJson::Relu => Activation::ReluFused,
    }
}

fn placeholder_qp() -> QuantParams {
    QuantParams {
        scale: 1.0,
        zero_point: 0,
    }
}

impl ModelFile {
    pub fn into_model(self) -> Result<QuantModel, ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::invariant(
                "format_version",
                format!("unsupported version {}", self.format_version),
            ));
        }
        let (input_qp, input_bounds) =
            tensor_quant(&self.input_quant, "scale").map_err(|e| e.at("input_quant"))?;
        let mut shape: Vec<usize> = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, lj) in self.layers.into_iter().enumerate() {
            let loc = |kind: &str| format!("layer {k} ({kind})");
            let layer = match lj {
                LayerJson::Qlinear {
                    weight,
                    weight_quant,
                    weight_bounds,
                    bias_acc,
                    output_quant,
                    activation: act,
                } => {
                    let out_dim = weight.len();
                    let in_dim = weight.first().map_or(0, Vec::len);
                    if let Some((j, r)) = weight.iter().enumerate().find(|(_, r)| r.len() != in_dim) {
                        return Err(ModelError::invariant(
                            "weight",
                            format!("row {j} has {} entries, row 0 has {in_dim}", r.len()),
                        )
                        .at(loc("qlinear")));
                    }
                    let (output_qp, out_bounds) =
                        tensor_quant(&output_quant, "output_quant").map_err(|e| e.at(loc("qlinear")))?;
                    shape = vec![out_dim];
                    Layer::Linear(QLinearLayer {
                        in_dim,
                        out_dim,
                        weights: weight.into_iter().flatten().collect(),
                        weight_qp: weight_quants(&weight_quant).map_err(|e| e.at(loc("qlinear")))?,
                        weight_bounds: weight_bounds.unwrap_or(DtypeBounds::INT8),
                        bias_acc,
                        input_qp: placeholder_qp(),
                        output_qp,
                        out_bounds,
                        activation: activation(act),
                        fused_clip_lb: out_bounds.lb,
                    })
                }
                LayerJson::Qconv {
                    weight,
                    weight_quant,
                    weight_bounds,
                    bias_acc,
                    output_quant,
                    activation: act,
                    stride,
                    padding,
                    kernel_shape,
                    in_shape,
                    out_shape,
                } => {
                    let flat: Vec<i64> = weight
                        .iter()
                        .flat_map(|a| a.iter().flat_map(|b| b.iter().flatten().copied()))
                        .collect();
                    let nested_ok = weight.len() == kernel_shape[0]
                        && weight.iter().all(|a| {
                            a.len() == kernel_shape[1]
                                && a.iter().all(|b| {
                                    b.len() == kernel_shape[2]
                                        && b.iter().all(|c| c.len() == kernel_shape[3])
                                })
                        });
                    if !nested_ok {
                        return Err(ModelError::invariant(
                            "weight",
                            format!("nesting does not match kernel_shape {kernel_shape:?}"),
                        )
                        .at(loc("qconv")));
                    }
                    let (output_qp, out_bounds) =
                        tensor_quant(&output_quant, "output_quant").map_err(|e| e.at(loc("qconv")))?;
                    shape = out_shape.to_vec();
                    Layer::Conv(QConvLayer {
                        kernel_shape,
                        kernel: flat,
                        stride,
                        padding,
                        in_shape,
                        out_shape,
                        weight_qp: weight_quants(&weight_quant).map_err(|e| e.at(loc("qconv")))?,
                        weight_bounds: weight_bounds.unwrap_or(DtypeBounds::INT8),
                        bias_acc,
                        input_qp: placeholder_qp(),
                        output_qp,
                        out_bounds,
                        activation: activation(act),
                        fused_clip_lb: out_bounds.lb,
                    })
                }
                LayerJson::Maxpool {
                    kernel,
                    stride,
                    in_shape,
                } => {
                    let in_shape = match in_shape {
                        Some(s) => s,
                        None => match shape.as_slice() {
                            &[c, h, w] => [c, h, w],
                            other => {
                                return Err(ModelError::invariant(
                                    "in_shape",
                                    format!("cannot infer a [c, h, w] shape from {other:?}"),
                                )
                                .at(loc("maxpool")))
                            }
                        },
                    };
                    let oh = crate::model::conv_out_dim(in_shape[1], kernel[0], stride[0], 0);
                    let ow = crate::model::conv_out_dim(in_shape[2], kernel[1], stride[1], 0);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(ModelError::invariant("kernel", "window larger than input or zero stride")
                            .at(loc("maxpool")));
                    };
                    let out_shape = [in_shape[0], oh, ow];
                    shape = out_shape.to_vec();
                    Layer::MaxPool(MaxPoolLayer {
                        kernel,
                        stride,
                        in_shape,
                        out_shape,
                    })
                }
                LayerJson::Relu => Layer::Relu(ReluLayer {
                    len: shape.iter().product(),
                    zero_point: 0,
                }),
            };
            layers.push(layer);
        }
        QuantModel::new(
            self.input_shape,
            input_qp,
            input_bounds,
            self.rounding_mode,
            layers,
        )
    }

    pub fn from_model(model: &QuantModel) -> Self {
        let qp = model.input_qp();
        let b = model.input_bounds();
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Linear(l) => LayerJson::Qlinear {
                    weight: l.weights.chunks(l.in_dim).map(<[i64]>::to_vec).collect(),
                    weight_quant: weight_quant_json(&l.weight_qp),
                    weight_bounds: (l.weight_bounds != DtypeBounds::INT8).then_some(l.weight_bounds),
                    bias_acc: l.bias_acc.clone(),
                    output_quant: tensor_quant_json(l.output_qp, l.out_bounds),
                    activation: activation_json(l.activation),
                },
                Layer::Conv(c) => {
                    let [_, ic, kh, kw] = c.kernel_shape;
                    let weight = c
                        .kernel
                        .chunks(ic * kh * kw)
                        .map(|a| {
                            a.chunks(kh * kw)
                                .map(|b| b.chunks(kw).map(<[i64]>::to_vec).collect())
                                .collect()
                        })
                        .collect();
                    LayerJson::Qconv {
                        weight,
                        weight_quant: weight_quant_json(&c.weight_qp),
                        weight_bounds: (c.weight_bounds != DtypeBounds::INT8).then_some(c.weight_bounds),
                        bias_acc: c.bias_acc.clone(),
                        output_quant: tensor_quant_json(c.output_qp, c.out_bounds),
                        activation: activation_json(c.activation),
                        stride: c.stride,
                        padding: c.padding,
                        kernel_shape: c.kernel_shape,
                        in_shape: c.in_shape,
                        out_shape: c.out_shape,
                    }
                }
                Layer::MaxPool(p) => LayerJson::Maxpool {
                    kernel: p.kernel,
                    stride: p.stride,
                    in_shape: Some(p.in_shape),
                },
                Layer::Relu(_) => LayerJson::Relu,
            })
            .collect();
        ModelFile {
            format_version: FORMAT_VERSION,
            input_shape: model.input_shape().to_vec(),
            input_quant: tensor_quant_json(qp, b),
            rounding_mode: model.rounding_mode(),
            layers,
        }
    }
}

fn tensor_quant_json(qp: QuantParams, b: DtypeBounds) -> TensorQuantJson {
    TensorQuantJson {
        scale: format!("{}", qp.scale),
        zero_point: qp.zero_point,
        lb: b.lb,
        ub: b.ub,
    }
}

fn weight_quant_json(qps: &[QuantParams]) -> Vec<WeightQuantJson> {
    qps.iter()
        .map(|q| WeightQuantJson {
            scale: format!("{}", q.scale),
            zero_point: q.zero_point,
        })
        .collect()
}

fn activation_json(a: Activation) -> ActivationJson {
    match a {
        Activation::None => ActivationJson::None,
        Activation::ReluFused => ActivationJson::Relu,
    }
}

/// Parses and validates a model file. Fusion state is taken as written.
pub fn load_model(bytes: &[u8]) -> Result<QuantModel, ModelError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let file: ModelFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ModelError::Parse {
            line: inner.line(),
            column: inner.column(),
            path,
            msg: inner.to_string(),
        }
    })?;
    file.into_model()
}

pub fn save_model(model: &QuantModel) -> String {
    serde_json::to_string_pretty(&ModelFile::from_model(model)).expect("model serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
      "format_version": 1,
      "input_shape": [2],
      "input_quant": {"scale": "0.5", "zero_point": 0, "lb": 0, "ub": 255},
      "rounding_mode": "half_up",
      "layers": [
        {"type": "qlinear",
         "weight": [[1, -2], [3, 4]],
         "weight_quant": [{"scale": "0.25", "zero_point": 0}, {"scale": "0.125", "zero_point": 1}],
         "bias_acc": [5, -7],
         "output_quant": {"scale": "0.1", "zero_point": 10, "lb": 0, "ub": 255},
         "activation": "none"}
      ]
    }"#;

    #[test]
    fn minimal_file_loads() {
        let m = load_model(MINIMAL.as_bytes()).unwrap();
        assert_eq!(m.layers().len(), 1);
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.input_len(), 2);
    }

    #[test]
    fn zero_scale_is_rejected() {
        let bad = MINIMAL.replace(r#""scale": "0.1""#, r#""scale": "0""#);
        let err = load_model(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("layer 0") && err.contains("scale"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bad = r#"{
          "format_version": 1, "input_shape": [2],
          "input_quant": {"scale": "1", "zero_point": 0, "lb": 0, "ub": 255},
          "layers": [
            {"type": "qlinear", "weight": [[1,1],[1,1],[1,1]],
             "weight_quant": [{"scale":"1","zero_point":0},{"scale":"1","zero_point":0},{"scale":"1","zero_point":0}],
             "bias_acc": [0,0,0], "output_quant": {"scale":"1","zero_point":0,"lb":0,"ub":255}, "activation": "relu"},
            {"type": "qlinear", "weight": [[1,1,1,1]],
             "weight_quant": [{"scale":"1","zero_point":0}],
             "bias_acc": [0], "output_quant": {"scale":"1","zero_point":0,"lb":0,"ub":255}, "activation": "none"}
          ]}"#;
        let err = load_model(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = load_model(b"{\n  \"format_version\": 1,\n  \"input_shape\": [2,\n}").unwrap_err();
        match err {
            ModelError::Parse { line, .. } => assert!(line >= 3),
            other => panic!("{other:?}"),
        }
        let err = load_model(MINIMAL.replace("\"bias_acc\": [5, -7]", "\"bias_acc\": [5, \"x\"]").as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("layers[0]") && err.contains("line 13"), "{err}");
    }

    #[test]
    fn save_then_load_is_identity() {
        let m = load_model(MINIMAL.as_bytes()).unwrap();
        let text = save_model(&m);
        assert_eq!(load_model(text.as_bytes()).unwrap(), m);
    }
}
