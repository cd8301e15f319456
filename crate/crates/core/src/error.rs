use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at line {line}, column {column} ({path}): {msg}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        msg: String,
    },
    #[error("invalid model: {location}{field}: {msg}")]
    Invariant {
        location: String,
        field: String,
        msg: String,
    },
    #[error("channel mismatch: layer has {layer} outputs, batch norm has {bn} channels")]
    ChannelMismatch { layer: usize, bn: usize },
}

impl ModelError {
    pub(crate) fn invariant(field: impl Into<String>, msg: impl Into<String>) -> Self {
        ModelError::Invariant {
            location: String::new(),
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn at(self, location: impl Into<String>) -> Self {
        match self {
            ModelError::Invariant { field, msg, .. } => ModelError::Invariant {
                location: format!("{}: ", location.into()),
                field,
                msg,
            },
            other => other,
        }
    }
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("input has {got} entries, model expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("input entry {index} = {value} outside [{lb}, {ub}]")]
    InputRange { index: usize, value: i64, lb: i64, ub: i64 },
    #[error("accumulator overflow in layer {layer}, neuron {neuron}")]
    Overflow { layer: usize, neuron: usize },
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("the ILP encoding models half-up rounding only; model uses {0:?}")]
    UnsupportedRounding(crate::quant::RoundingMode),
    #[error("lower clip bound {lo} exceeds upper {hi}")]
    ClipOrder { lo: i64, hi: i64 },
    #[error("{0}")]
    Query(String),
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Solver(#[from] qnnv_ilp::IlpError),
    #[error("invalid query: {0}")]
    Query(String),
}
