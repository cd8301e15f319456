//! Local-robustness queries over the integer input lattice.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::VerifyError;
use crate::infer::{predict, IntTensor};
use crate::model::QuantModel;

/// Is every integer input within `radius` (ℓ∞) of `center` classified as `label`?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessQuery {
    pub center: IntTensor,
    pub label: usize,
    pub radius: i64,
    pub timeout: Duration,
}

impl RobustnessQuery {
    pub fn new(center: Vec<i64>, label: usize, radius: i64, timeout: Duration) -> Self {
        RobustnessQuery {
            center: IntTensor::flat(center),
            label,
            radius,
            timeout,
        }
    }

    pub fn validate(&self, model: &QuantModel) -> Result<(), VerifyError> {
        if self.center.len() != model.input_len() {
            return Err(VerifyError::Query(format!(
                "center has {} entries, model expects {}",
                self.center.len(),
                model.input_len()
            )));
        }
        let b = model.input_bounds();
        if let Some((i, v)) = self.center.data.iter().enumerate().find(|(_, v)| !b.contains(**v)) {
            return Err(VerifyError::Query(format!(
                "center entry {i} = {v} outside [{}, {}]",
                b.lb, b.ub
            )));
        }
        if self.label >= model.num_classes() {
            return Err(VerifyError::Query(format!(
                "label {} but model has {} classes",
                self.label,
                model.num_classes()
            )));
        }
        if self.radius < 0 {
            return Err(VerifyError::Query(format!("negative radius {}", self.radius)));
        }
        Ok(())
    }

    /// Per-pixel `[max(lb, x* − r), min(ub, x* + r)]`.
    pub fn input_box(&self, model: &QuantModel) -> Vec<(i64, i64)> {
        let b = model.input_bounds();
        self.center
            .data
            .iter()
            .map(|&c| ((c - self.radius).max(b.lb), (c + self.radius).min(b.ub)))
            .collect()
    }
}

/// True iff `x` is in the ball, within the input dtype, and misclassified.
pub fn validate_counterexample(model: &QuantModel, query: &RobustnessQuery, x: &[i64]) -> bool {
    if x.len() != query.center.len() {
        return false;
    }
    let b = model.input_bounds();
    let in_ball = x
        .iter()
        .zip(&query.center.data)
        .all(|(&v, &c)| (v - c).abs() <= query.radius && b.contains(v));
    in_ball && matches!(predict(model, x), Ok(l) if l != query.label)
}

/// One entry of a query file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub input: Vec<i64>,
    pub label: usize,
    pub radius: i64,
}

/// Parses a JSON array of `{input, label, radius}` records.
pub fn load_queries(bytes: &[u8], timeout: Duration) -> Result<Vec<RobustnessQuery>, VerifyError> {
    let records: Vec<QueryRecord> =
        serde_json::from_slice(bytes).map_err(|e| VerifyError::Query(format!("query file: {e}")))?;
    Ok(records
        .into_iter()
        .map(|r| RobustnessQuery::new(r.input, r.label, r.radius, timeout))
        .collect())
}
