//! Regression and classification metrics over prediction/label vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_eval, ModelConfig, ModelParams, SampleBatch};

/// The full metric suite at one classification threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub mape_percent: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

/// Mean binary cross-entropy with boundary clamping, as a plain scalar.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension {
            op: "bce_loss",
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    if probs.is_empty() {
        return Err(Error::Precondition("bce_loss over an empty vector".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = p.clamp(1e-12, 1.0 - 1e-12);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Compute every metric from raw predictions. Predictions at or above the
/// threshold count as positive. Zero denominators follow the conventions
/// precision = recall = 0 and f1 = 0 when precision + recall = 0; MAPE
/// guards the divisor with `max(|y|, 1)`.
pub fn compute_metrics(probs: &[f64], labels: &[f64], threshold: f64) -> Result<MetricReport> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension {
            op: "compute_metrics",
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    if probs.is_empty() {
        return Err(Error::Precondition("metrics over an empty partition".into()));
    }
    let n = probs.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ape = 0.0;
    let (mut tp, mut fp, mut tn, mut fnce) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in probs.iter().zip(labels) {
        let d = p - y;
        se += d * d;
        ae += d.abs();
        ape += d.abs() / y.abs().max(1.0);
        let pred_pos = p >= threshold;
        let actual_pos = y >= 0.5;
        match (pred_pos, actual_pos) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnce += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fnce > 0.0 { tp / (tp + fnce) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricReport {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mape_percent: 100.0 * ape / n,
        accuracy: (tp + tn) / n,
        precision,
        recall,
        f1,
        threshold,
    })
}

/// Run the model over a partition and compute its metrics.
pub fn evaluate(
    params: &ModelParams,
    partition: &SampleBatch,
    config: &ModelConfig,
    threshold: f64,
) -> Result<MetricReport> {
    if partition.is_empty() {
        return Err(Error::Precondition("evaluate over an empty partition".into()));
    }
    let probs = forward_eval(partition, params, config)?;
    compute_metrics(&probs, &partition.labels(), threshold)
}
