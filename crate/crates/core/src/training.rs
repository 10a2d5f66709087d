//! Masked-reconstruction pretraining, task fine-tuning, losses, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SeriesDataset, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, mse_mae, percentile, prf1, MetricReport};
use crate::model::{FusAD, HeadKind, Task};
use crate::tensor::{AdamW, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Uniformly random patches at the configured ratio.
    #[default]
    Random,
    /// Data-dependent selection; no rule is defined for it yet.
    Adaptive,
}

fn default_ratio() -> f64 {
    0.25
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default)]
    pub strategy: MaskStrategy,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: default_ratio(),
            strategy: MaskStrategy::Random,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.ratio)));
        }
        Ok(())
    }

    /// Masked patches per row: `round(ratio * Z)` clamped to `[1, Z - 1]`.
    pub fn masked_count(&self, patches: usize) -> Result<usize> {
        self.validate()?;
        if patches < 2 {
            return Err(Error::Config(format!(
                "masking needs at least 2 patches per row, got {patches}"
            )));
        }
        Ok(((self.ratio * patches as f64).round() as usize).clamp(1, patches - 1))
    }

    /// Keep-mask `[rows, Z, 1]` with 0 on masked patches.
    pub fn sample(&self, rows: usize, patches: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let m = self.masked_count(patches)?;
        if self.strategy == MaskStrategy::Adaptive {
            return Err(Error::Config(
                "adaptive mask selection has no defined rule; use strategy = \"random\"".into(),
            ));
        }
        let mut keep = Vec::with_capacity(rows * patches);
        let mut order: Vec<usize> = (0..patches).collect();
        for _ in 0..rows {
            order.shuffle(rng);
            let mut row = vec![1.0; patches];
            for &i in &order[..m] {
                row[i] = 0.0;
            }
            keep.extend(row);
        }
        Tensor::new(vec![rows, patches, 1], keep)
    }
}

/// Timestep weights `[rows, T]` that are 1 inside masked patches.
pub fn timestep_weights(keep: &Tensor, len: usize, patch_len: usize) -> Result<Tensor> {
    let (rows, z) = (keep.shape()[0], keep.shape()[1]);
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        for t in 0..len {
            out.push(1.0 - keep.data()[r * z + t / patch_len]);
        }
    }
    Tensor::new(vec![rows, len], out)
}

/// `sum(lambda * (x - x_hat)^2) / sum(lambda)`.
pub fn masked_mse<'t>(pred: Var<'t>, target: &Tensor, lambda: &Tensor) -> Result<Var<'t>> {
    let total: f64 = lambda.data().iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input("masked loss with no masked positions".into()));
    }
    if pred.shape() != target.shape() || lambda.len() != target.len() {
        return Err(Error::shape(format!(
            "masked loss over {:?}, target {:?}, weights {:?}",
            pred.shape(),
            target.shape(),
            lambda.shape()
        )));
    }
    let tape = pred.tape();
    let lambda = lambda.reshape(target.shape())?;
    let diff = pred.sub(tape.constant(target.clone()))?;
    Ok(diff.square().mul(tape.constant(lambda))?.sum().scale(1.0 / total))
}

/// Plain-value version of [`masked_mse`].
pub fn masked_mse_value(x: &[f64], x_hat: &[f64], lambda: &[f64]) -> Result<f64> {
    let total: f64 = lambda.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input("masked loss with no masked positions".into()));
    }
    if x.len() != x_hat.len() || x.len() != lambda.len() {
        return Err(Error::shape("masked loss length mismatch".to_string()));
    }
    let se: f64 = x
        .iter()
        .zip(x_hat)
        .zip(lambda)
        .map(|((a, b), l)| l * (a - b) * (a - b))
        .sum();
    Ok(se / total)
}

/// `(1 - eps) * onehot(y) + eps / k`.
pub fn smooth_targets(classes: usize, y: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / classes as f64; classes];
    t[y] += 1.0 - eps;
    t
}

/// Mean over samples of `-sum_i y_smooth_i * log_softmax(logits)_i`; logits `[S, k]`.
pub fn label_smooth_ce<'t>(logits: Var<'t>, labels: &[usize], eps: f64) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {shape:?} for {} labels",
            labels.len()
        )));
    }
    let k = shape[1];
    if k < 2 {
        return Err(Error::Input("cross-entropy needs at least 2 classes".into()));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} with only {k} classes")));
    }
    let targets: Vec<f64> = labels.iter().flat_map(|&y| smooth_targets(k, y, eps)).collect();
    let targets = logits.tape().constant(Tensor::new(shape.clone(), targets)?);
    let nll = logits.log_softmax().mul(targets)?.sum();
    Ok(nll.scale(-1.0 / labels.len() as f64))
}

fn default_lr_pretrain() -> f64 {
    1e-3
}
fn default_lr_finetune() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    128
}
fn default_smoothing() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr_pretrain")]
    pub lr_pretrain: f64,
    #[serde(default = "default_lr_finetune")]
    pub lr_finetune: f64,
    /// Defaults to 1e-4 for classification and 1e-6 otherwise.
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to 100 for classification and 20 otherwise.
    #[serde(default)]
    pub epochs_pretrain: Option<usize>,
    /// Defaults to 200 for classification and 50 otherwise.
    #[serde(default)]
    pub epochs_finetune: Option<usize>,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: default_lr_pretrain(),
            lr_finetune: default_lr_finetune(),
            weight_decay: None,
            batch_size: default_batch(),
            epochs_pretrain: None,
            epochs_finetune: None,
            label_smoothing: default_smoothing(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_pretrain > 0.0 && self.lr_finetune > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay.is_some_and(|w| !(w >= 0.0)) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `(pretrain, finetune)` epoch counts for `task`.
    pub fn epochs_for(&self, task: Task) -> (usize, usize) {
        let (p, f) = match task {
            Task::Classification { .. } => (100, 200),
            _ => (20, 50),
        };
        (self.epochs_pretrain.unwrap_or(p), self.epochs_finetune.unwrap_or(f))
    }

    pub fn weight_decay_for(&self, task: Task) -> f64 {
        self.weight_decay.unwrap_or(match task {
            Task::Classification { .. } => 1e-4,
            _ => 1e-6,
        })
    }
}

/// One line of a training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub metric: Option<f64>,
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record is serializable")
    }
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

fn require_nonempty(ds: &SeriesDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        Err(Error::Input(format!("{what} dataset is empty")))
    } else {
        Ok(())
    }
}

fn ensure_calibrated(model: &mut FusAD, ds: &SeriesDataset, batch: usize) -> Result<()> {
    if !model.is_calibrated() {
        let idx: Vec<usize> = (0..ds.len().min(batch)).collect();
        model.calibrate(&ds.stack_inputs(&idx)?)?;
    }
    Ok(())
}

/// Loss of one masked-reconstruction step on the samples `idx`.
fn reconstruction_loss<'t>(
    tape: &'t Tape,
    model: &FusAD,
    ds: &SeriesDataset,
    idx: &[usize],
    mask: &MaskSpec,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Var<'t>> {
    let x = ds.stack_inputs(idx)?;
    let rows = idx.len() * model.cfg.n_vars;
    let keep = mask.sample(rows, model.cfg.tokens(), rng)?;
    let lambda = timestep_weights(&keep, model.cfg.seq_len, model.cfg.patch.patch_len)?;
    let pred = model.forward_head(tape, &x, HeadKind::Reconstruction, Some(&keep), training)?;
    masked_mse(pred, &x, &lambda)
}

/// Loss of the configured task on the samples `idx`.
fn task_loss<'t>(
    tape: &'t Tape,
    model: &FusAD,
    ds: &SeriesDataset,
    idx: &[usize],
    mask: &MaskSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t>> {
    match model.cfg.task {
        Task::Classification { .. } => {
            let x = ds.stack_inputs(idx)?;
            let logits = model.forward(tape, &x, true)?;
            label_smooth_ce(logits, &ds.classes(idx)?, cfg.label_smoothing)
        }
        Task::Forecasting { .. } => {
            let x = ds.stack_inputs(idx)?;
            let target = ds.futures(idx)?;
            let pred = model.forward(tape, &x, true)?;
            masked_mse(pred, &target, &Tensor::ones(target.shape()))
        }
        Task::Anomaly => reconstruction_loss(tape, model, ds, idx, mask, rng, true),
    }
}

fn run_epoch<F>(
    model: &mut FusAD,
    opt: &mut AdamW,
    n: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
    mut loss_fn: F,
) -> Result<f64>
where
    F: for<'t> FnMut(&'t Tape, &FusAD, &[usize], &mut ChaCha8Rng) -> Result<Var<'t>>,
{
    let mut total = 0.0;
    for idx in batches(n, batch, rng) {
        let tape = Tape::new();
        let loss = loss_fn(&tape, model, &idx, rng)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::non_finite("training loss"));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        opt.step(&mut model.store, &grads)?;
        total += value * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Masked-reconstruction pretraining. On a non-finite loss the parameters
/// are rolled back to the end of the last completed epoch and the error is
/// returned.
pub fn pretrain(
    model: &mut FusAD,
    data: &SeriesDataset,
    mask: &MaskSpec,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    mask.masked_count(model.cfg.tokens())?;
    require_nonempty(data, "pretraining")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ensure_calibrated(model, data, cfg.batch_size)?;
    let mut opt = AdamW::new(cfg.lr_pretrain, cfg.weight_decay_for(Task::Anomaly));
    let start = Instant::now();
    let epochs = cfg.epochs_for(model.cfg.task).0;
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let good = model.store.snapshot();
        let loss = run_epoch(model, &mut opt, data.len(), cfg.batch_size, &mut rng, |tape, m, idx, rng| {
            reconstruction_loss(tape, m, data, idx, mask, rng, true)
        });
        let loss = match loss {
            Ok(l) => l,
            Err(e) => {
                model.store.restore(&good);
                return Err(e);
            }
        };
        records.push(EpochRecord {
            phase: "pretrain".into(),
            epoch,
            loss,
            metric: None,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

fn higher_is_better(task: Task) -> bool {
    matches!(task, Task::Classification { .. })
}

/// Validation metric used for best-epoch selection: accuracy for
/// classification, MSE for forecasting, and masked reconstruction loss for
/// anomaly detection (with a fixed mask seed).
pub fn validation_metric(model: &FusAD, val: &SeriesDataset, mask: &MaskSpec, batch: usize) -> Result<f64> {
    require_nonempty(val, "validation")?;
    let idx: Vec<usize> = (0..val.len()).collect();
    match model.cfg.task {
        Task::Classification { .. } => {
            let preds = predict_classes(model, val, batch)?;
            accuracy(&preds, &val.classes(&idx)?)
        }
        Task::Forecasting { .. } => {
            let pred = predict(model, val, batch)?;
            Ok(mse_mae(pred.data(), val.futures(&idx)?.data())?.0)
        }
        Task::Anomaly => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut total = 0.0;
            for chunk in idx.chunks(batch) {
                let tape = Tape::new();
                let l = reconstruction_loss(&tape, model, val, chunk, mask, &mut rng, false)?;
                total += l.value().item() * chunk.len() as f64;
            }
            Ok(total / val.len() as f64)
        }
    }
}

/// Fine-tune on the configured task, keeping the best validation epoch.
pub fn finetune(
    model: &mut FusAD,
    train: &SeriesDataset,
    val: &SeriesDataset,
    mask: &MaskSpec,
    cfg: &TrainConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    require_nonempty(train, "training")?;
    check_task(model.cfg.task, train)?;
    check_task(model.cfg.task, val)?;
    let task = model.cfg.task;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    ensure_calibrated(model, train, cfg.batch_size)?;
    let mut opt = AdamW::new(cfg.lr_finetune, cfg.weight_decay_for(task));
    let start = Instant::now();
    let epochs = cfg.epochs_for(task).1;
    let mut records = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    for epoch in 1..=epochs {
        let good = model.store.snapshot();
        let loss = run_epoch(model, &mut opt, train.len(), cfg.batch_size, &mut rng, |tape, m, idx, rng| {
            task_loss(tape, m, train, idx, mask, cfg, rng)
        });
        let loss = match loss {
            Ok(l) => l,
            Err(e) => {
                model.store.restore(&good);
                return Err(e);
            }
        };
        let metric = validation_metric(model, val, mask, cfg.batch_size)?;
        let better = match &best {
            None => true,
            Some((_, m, _)) if higher_is_better(task) => metric > *m,
            Some((_, m, _)) => metric < *m,
        };
        if better {
            best = Some((epoch, metric, model.store.snapshot()));
        }
        records.push(EpochRecord {
            phase: "finetune".into(),
            epoch,
            loss,
            metric: Some(metric),
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, best_metric) = match best {
        Some((e, m, snap)) => {
            model.store.restore(&snap);
            (e, m)
        }
        None => (0, f64::NAN),
    };
    Ok(FinetuneReport {
        records,
        best_epoch,
        best_metric,
    })
}

/// Dataset targets must match the model's task.
pub fn check_task(task: Task, ds: &SeriesDataset) -> Result<()> {
    let expected = match task {
        Task::Classification { .. } => TaskKind::Classification,
        Task::Forecasting { .. } => TaskKind::Forecasting,
        Task::Anomaly => TaskKind::Anomaly,
    };
    if ds.kind != expected {
        return Err(Error::Config(format!(
            "model task is {} but the dataset holds {} samples",
            task.name(),
            ds.kind.as_str()
        )));
    }
    Ok(())
}

/// Head outputs for every sample, evaluated in chunks.
pub fn predict(model: &FusAD, ds: &SeriesDataset, batch: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        let tape = Tape::new();
        let y = model.forward(&tape, &ds.stack_inputs(chunk)?, false)?.value();
        shape = y.shape().to_vec();
        data.extend_from_slice(y.data());
    }
    shape[0] = ds.len();
    Tensor::new(shape, data)
}

pub fn predict_classes(model: &FusAD, ds: &SeriesDataset, batch: usize) -> Result<Vec<usize>> {
    let logits = predict(model, ds, batch)?;
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            (0..k)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0)
        })
        .collect())
}

/// Anomaly scores of every sample, concatenated in sample order.
pub fn anomaly_scores(model: &FusAD, ds: &SeriesDataset, batch: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        out.extend_from_slice(model.anomaly_scores(&ds.stack_inputs(chunk)?)?.data());
    }
    Ok(out)
}

/// Score threshold at `q` percent of scores on an anomaly-free calibration split.
pub fn anomaly_threshold(model: &FusAD, calibration: &SeriesDataset, q: f64, batch: usize) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::Config("anomaly calibration split is empty".into()));
    }
    percentile(&anomaly_scores(model, calibration, batch)?, q)
}

/// Task metrics on `test`. Anomaly evaluation needs a calibration split.
pub fn evaluate(
    model: &FusAD,
    test: &SeriesDataset,
    calibration: Option<&SeriesDataset>,
    batch: usize,
) -> Result<MetricReport> {
    check_task(model.cfg.task, test)?;
    require_nonempty(test, "evaluation")?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let config = serde_json::to_value(&model.cfg).expect("config is serializable");
    let report = match model.cfg.task {
        Task::Classification { .. } => {
            let preds = predict_classes(model, test, batch)?;
            let labels = test.classes(&idx)?;
            let per_sample = preds
                .iter()
                .zip(&labels)
                .map(|(p, l)| f64::from(u8::from(p == l)))
                .collect();
            MetricReport {
                per_sample,
                ..MetricReport::new("classification").with("accuracy", accuracy(&preds, &labels)?)
            }
        }
        Task::Forecasting { .. } => {
            let pred = predict(model, test, batch)?;
            let truth = test.futures(&idx)?;
            let (mse, mae) = mse_mae(pred.data(), truth.data())?;
            let per = pred.len() / test.len();
            let per_sample = pred
                .data()
                .chunks(per)
                .zip(truth.data().chunks(per))
                .map(|(p, t)| mse_mae(p, t).map(|m| m.0))
                .collect::<Result<_>>()?;
            MetricReport {
                per_sample,
                ..MetricReport::new("forecasting").with("mse", mse).with("mae", mae)
            }
        }
        Task::Anomaly => {
            let calib = calibration
                .ok_or_else(|| Error::Config("anomaly evaluation needs a calibration split".into()))?;
            let q = model.cfg.anomaly_percentile;
            let threshold = anomaly_threshold(model, calib, q, batch)?;
            let scores = anomaly_scores(model, test, batch)?;
            let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s > threshold)).collect();
            let truth = test.labels(&idx)?;
            let raw = prf1(&pred, &truth, false)?;
            let adj = prf1(&pred, &truth, true)?;
            MetricReport {
                per_sample: scores,
                ..MetricReport::new("anomaly")
                    .with("threshold", threshold)
                    .with("precision", adj.precision)
                    .with("recall", adj.recall)
                    .with("f1", adj.f1)
                    .with("precision_raw", raw.precision)
                    .with("recall_raw", raw.recall)
                    .with("f1_raw", raw.f1)
            }
        }
    };
    let report = MetricReport { config, ..report };
    report.validate()?;
    Ok(report)
}
