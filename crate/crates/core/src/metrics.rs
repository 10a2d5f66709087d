//! Evaluation metrics: accuracy, MSE/MAE, precision/recall/F1 with optional
//! point adjustment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "accuracy over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("accuracy over zero samples".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean squared and mean absolute error over all elements.
pub fn mse_mae(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Input(format!(
            "mse/mae over {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n, ae / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Credit whole true segments that contain at least one positive prediction.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Vec<u8> {
    let mut out = pred.to_vec();
    let mut t = 0;
    while t < truth.len() {
        if truth[t] == 0 {
            t += 1;
            continue;
        }
        let start = t;
        while t < truth.len() && truth[t] != 0 {
            t += 1;
        }
        if pred[start..t].iter().any(|&p| p != 0) {
            out[start..t].fill(1);
        }
    }
    out
}

pub fn prf1(pred: &[u8], truth: &[u8], adjust: bool) -> Result<Prf1> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "label length mismatch: {} predicted vs {} true",
            pred.len(),
            truth.len()
        )));
    }
    let adjusted;
    let pred = if adjust {
        adjusted = point_adjust(pred, truth);
        &adjusted[..]
    } else {
        pred
    };
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Prf1 {
        precision,
        recall,
        f1,
    })
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Input(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// One evaluation, serialized as a single JSON line.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample: Vec<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            ..Default::default()
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// Reports must carry finite scalars only.
    pub fn validate(&self) -> Result<()> {
        match self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            Some((k, _)) => Err(Error::non_finite(format!("metric `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report is serializable")
    }
}
