//! Robustness verification for integer-quantized neural networks.
//!
//! A query asks whether every integer input within an ℓ∞ ball around a
//! center keeps the predicted label. Three stages answer it in order of cost:
//! a gradient attack on a floating-point surrogate ([`attack`]), sound bound
//! propagation ([`interval`]), and an exact integer program solved by
//! branch-and-bound ([`encode`], backed by `qnnv-ilp`). [`pipeline`] runs them
//! under a shared time budget.

pub mod attack;
pub mod encode;
pub mod error;
pub mod format;
pub mod fusion;
pub mod infer;
pub mod interval;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod query;
pub mod synth;

pub use error::{EncodeError, InferenceError, ModelError, VerifyError};
pub use format::{load_model, save_model};
pub use infer::{argmax, forward, predict, IntTensor};
pub use model::{Layer, QuantModel};
pub use quant::{DtypeBounds, QuantParams, Requant, RoundingMode};
pub use query::{validate_counterexample, RobustnessQuery};
pub use pipeline::{verify, verify_batch, Mode, Report, Stage, Status, Verdict, VerifyConfig};
