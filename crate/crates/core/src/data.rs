//! Series containers, CSV ingestion and export, normalization, windowing,
//! splits, and the synthetic corpora.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Forecasting,
    Anomaly,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Forecasting => "forecasting",
            TaskKind::Anomaly => "anomaly",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "forecasting" => Ok(TaskKind::Forecasting),
            "anomaly" => Ok(TaskKind::Anomaly),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

/// A single multivariate series `[N, T]` with optional per-timestep labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub values: Tensor,
    pub labels: Option<Vec<u8>>,
}

impl Series {
    pub fn new(values: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape(format!("series must be [N, T], got {:?}", values.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != values.shape()[1] {
                return Err(Error::Input(format!(
                    "{} labels for a series of length {}",
                    l.len(),
                    values.shape()[1]
                )));
            }
        }
        Ok(Self { values, labels })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.values.data()[c * t..(c + 1) * t]
    }

    /// Timesteps `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Result<Series> {
        if start >= end || end > self.len() {
            return Err(Error::Input(format!(
                "range {start}..{end} outside series of length {}",
                self.len()
            )));
        }
        let n = self.channels();
        let data = (0..n)
            .flat_map(|c| self.channel(c)[start..end].iter().copied())
            .collect();
        Series::new(
            Tensor::new(vec![n, end - start], data)?,
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
        )
    }

    /// Chronological split at `at`.
    pub fn split_at(&self, at: usize) -> Result<(Series, Series)> {
        Ok((self.range(0, at)?, self.range(at, self.len())?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    None,
    Class(usize),
    /// Future values `[N, h]`.
    Future(Tensor),
    /// Per-timestep anomaly labels.
    Labels(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[N, T]`
    pub x: Tensor,
    pub target: Target,
}

/// Equal-shape samples for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub kind: TaskKind,
    pub samples: Vec<Sample>,
    pub stats: Option<NormStats>,
}

impl SeriesDataset {
    pub fn new(kind: TaskKind, samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.x.shape().to_vec();
            if shape.len() != 2 {
                return Err(Error::shape(format!("samples must be [N, T], got {shape:?}")));
            }
            if let Some(bad) = samples.iter().position(|s| s.x.shape() != shape.as_slice()) {
                return Err(Error::Input(format!(
                    "sample {bad} has shape {:?}, expected {shape:?}",
                    samples[bad].x.shape()
                )));
            }
        }
        Ok(Self {
            kind,
            samples,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.shape()[0])
    }

    pub fn seq_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.shape()[1])
    }

    pub fn num_classes(&self) -> usize {
        self.samples
            .iter()
            .filter_map(|s| match s.target {
                Target::Class(c) => Some(c + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> SeriesDataset {
        SeriesDataset {
            kind: self.kind,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            stats: self.stats.clone(),
        }
    }

    /// Inputs of the selected samples stacked to `[S, N, T]`.
    pub fn stack_inputs(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let (n, t) = (self.n_channels(), self.seq_len());
        let mut data = Vec::with_capacity(idx.len() * n * t);
        for &i in idx {
            data.extend_from_slice(self.samples[i].x.data());
        }
        Tensor::new(vec![idx.len(), n, t], data)
    }

    pub fn classes(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| match self.samples[i].target {
                Target::Class(c) => Ok(c),
                _ => Err(Error::Input(format!("sample {i} has no class label"))),
            })
            .collect()
    }

    /// Forecast targets stacked to `[S, N, h]`.
    pub fn futures(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut shape = None;
        for &i in idx {
            match &self.samples[i].target {
                Target::Future(f) => {
                    shape.get_or_insert_with(|| f.shape().to_vec());
                    data.extend_from_slice(f.data());
                }
                _ => return Err(Error::Input(format!("sample {i} has no forecast target"))),
            }
        }
        let s = shape.ok_or_else(|| Error::Input("empty batch".into()))?;
        Tensor::new(vec![idx.len(), s[0], s[1]], data)
    }

    /// Per-timestep labels of the selected samples, concatenated.
    pub fn labels(&self, idx: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &i in idx {
            match &self.samples[i].target {
                Target::Labels(l) => out.extend_from_slice(l),
                _ => return Err(Error::Input(format!("sample {i} has no anomaly labels"))),
            }
        }
        Ok(out)
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose fitted std was zero; their std is forced to 1.
    pub constant: Vec<bool>,
}

impl NormStats {
    fn from_channels(channels: Vec<Vec<f64>>) -> Result<Self> {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut constant = Vec::new();
        for values in channels {
            if values.is_empty() {
                return Err(Error::Input("cannot fit normalization on an empty split".into()));
            }
            let n = values.len() as f64;
            let m = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            let flat = !(s > 1e-12);
            mean.push(m);
            std.push(if flat { 1.0 } else { s });
            constant.push(flat);
        }
        Ok(Self {
            mean,
            std,
            constant,
        })
    }

    pub fn fit_series(train: &Series) -> Result<Self> {
        Self::from_channels((0..train.channels()).map(|c| train.channel(c).to_vec()).collect())
    }

    pub fn fit_dataset(train: &SeriesDataset) -> Result<Self> {
        let (n, t) = (train.n_channels(), train.seq_len());
        let mut channels = vec![Vec::with_capacity(train.len() * t); n];
        for s in &train.samples {
            for (c, ch) in channels.iter_mut().enumerate() {
                ch.extend_from_slice(&s.x.data()[c * t..(c + 1) * t]);
            }
        }
        Self::from_channels(channels)
    }

    fn map_rows(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let n = self.mean.len();
        let t = *x.shape().last().unwrap_or(&0);
        if x.rank() < 2 || x.shape()[x.rank() - 2] != n {
            return Err(Error::shape(format!(
                "normalization fitted on {n} channels, got {:?}",
                x.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / t) % n;
                f(v, self.mean[c], self.std[c])
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// `(x - mean) / std` per channel, for any `[.., N, T]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, s| v * s + m)
    }

    /// Stable fingerprint of the statistics, for leakage checks.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Fit on `train` only and normalize both sides with the training statistics.
pub fn zscore_normalize(
    train: &SeriesDataset,
    test: &SeriesDataset,
) -> Result<(SeriesDataset, SeriesDataset)> {
    let stats = NormStats::fit_dataset(train)?;
    let map = |ds: &SeriesDataset| -> Result<SeriesDataset> {
        let samples = ds
            .samples
            .iter()
            .map(|s| {
                let target = match &s.target {
                    Target::Future(f) => Target::Future(stats.apply(f)?),
                    other => other.clone(),
                };
                Ok(Sample {
                    x: stats.apply(&s.x)?,
                    target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SeriesDataset {
            kind: ds.kind,
            samples,
            stats: Some(stats.clone()),
        })
    };
    Ok((map(train)?, map(test)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub lookback: usize,
    /// Forecast horizon; 0 for unlabelled or anomaly windows.
    #[serde(default)]
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowSpec {
    pub fn count(&self, len: usize) -> usize {
        if self.lookback + self.horizon > len || self.stride == 0 {
            0
        } else {
            (len - self.lookback - self.horizon) / self.stride + 1
        }
    }
}

/// Ordered `(lookback, target)` windows over a series.
///
/// With `horizon > 0` targets are the next `horizon` values; otherwise they
/// are the window's labels when the series has them.
pub fn sliding_windows(series: &Series, spec: &WindowSpec) -> Result<SeriesDataset> {
    if spec.lookback == 0 || spec.stride == 0 {
        return Err(Error::Input("lookback and stride must be positive".into()));
    }
    if spec.lookback + spec.horizon > series.len() {
        return Err(Error::Input(format!(
            "window of {} + {} does not fit a series of length {}",
            spec.lookback,
            spec.horizon,
            series.len()
        )));
    }
    let mut samples = Vec::with_capacity(spec.count(series.len()));
    for w in 0..spec.count(series.len()) {
        let start = w * spec.stride;
        let look = series.range(start, start + spec.lookback)?;
        let target = if spec.horizon > 0 {
            let end = start + spec.lookback;
            Target::Future(series.range(end, end + spec.horizon)?.values)
        } else if let Some(l) = look.labels.clone() {
            Target::Labels(l)
        } else {
            Target::None
        };
        samples.push(Sample {
            x: look.values,
            target,
        });
    }
    let kind = if spec.horizon > 0 {
        TaskKind::Forecasting
    } else {
        TaskKind::Anomaly
    };
    SeriesDataset::new(kind, samples)
}

/// Stratified shuffle: `train_fraction` of each class goes to the training side.
pub fn stratified_split(
    ds: &SeriesDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = ds.classes(&(0..ds.len()).collect::<Vec<_>>())?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Column layout of a series CSV.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CsvSchema {
    pub has_header: bool,
    /// First column is a timestamp and is skipped.
    pub timestamp: bool,
    /// A `label` column is present (last column when there is no header).
    pub label: bool,
}

fn parse_cell(cell: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column,
        message: format!("`{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column,
            message: format!("non-finite value `{cell}`"),
        });
    }
    Ok(v)
}

/// Read a series CSV (rows are timesteps). Row and column numbers in errors
/// are 1-based and count the header line.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Series> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Series> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut label_col = None;
    let mut width = None;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if i == 0 && schema.has_header {
            if schema.label {
                label_col = Some(record.iter().position(|h| h == "label").ok_or_else(|| {
                    Error::Parse {
                        row,
                        column: 0,
                        message: "header has no `label` column".into(),
                    }
                })?);
            }
            width = Some(record.len());
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row,
                column: record.len().min(w) + 1,
                message: format!("ragged row: {} fields, expected {w}", record.len()),
            });
        }
        let lc = if schema.label {
            Some(*label_col.get_or_insert(w - 1))
        } else {
            None
        };
        let skip = usize::from(schema.timestamp);
        if columns.is_empty() {
            let n = w - skip - usize::from(lc.is_some());
            if n == 0 {
                return Err(Error::Parse {
                    row,
                    column: 1,
                    message: "no value columns".into(),
                });
            }
            columns = vec![Vec::new(); n];
        }
        let mut c = 0;
        for (j, cell) in record.iter().enumerate() {
            if j < skip {
                continue;
            }
            let v = parse_cell(cell, row, j + 1)?;
            if Some(j) == lc {
                labels.push(u8::from(v != 0.0));
            } else {
                columns[c].push(v);
                c += 1;
            }
        }
    }
    if columns.is_empty() || columns[0].is_empty() {
        return Err(Error::Input("CSV holds no data rows".into()));
    }
    let t = columns[0].len();
    let n = columns.len();
    let data = columns.into_iter().flatten().collect();
    Series::new(
        Tensor::new(vec![n, t], data)?,
        schema.label.then_some(labels),
    )
}

/// Write a series in the layout read by [`load_csv`] with a header.
pub fn export_csv(series: &Series, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..series.channels()).map(|c| format!("x{c}")).collect();
    if series.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_io)?;
    for t in 0..series.len() {
        let mut row: Vec<String> = (0..series.channels())
            .map(|c| format!("{:?}", series.channel(c)[t]))
            .collect();
        if let Some(l) = &series.labels {
            row.push(l[t].to_string());
        }
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Classification CSV: header `sample_id,class,channel,v0,..`, one row per
/// sample and channel.
pub fn load_classification_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let series = read_csv(
        file,
        &CsvSchema {
            has_header: true,
            ..Default::default()
        },
    )?;
    let rows = series.len();
    let width = series.channels();
    if width < 4 {
        return Err(Error::Input("classification CSV needs sample_id, class, channel and values".into()));
    }
    let col = |c: usize, r: usize| series.channel(c)[r];
    let mut grouped: BTreeMap<usize, (usize, BTreeMap<usize, Vec<f64>>)> = BTreeMap::new();
    for r in 0..rows {
        let id = col(0, r) as usize;
        let class = col(1, r) as usize;
        let ch = col(2, r) as usize;
        let values = (3..width).map(|c| col(c, r)).collect();
        let entry = grouped.entry(id).or_insert_with(|| (class, BTreeMap::new()));
        if entry.0 != class {
            return Err(Error::Parse {
                row: r + 2,
                column: 2,
                message: format!("sample {id} has conflicting classes"),
            });
        }
        entry.1.insert(ch, values);
    }
    let samples = grouped
        .into_values()
        .map(|(class, chans)| {
            let n = chans.len();
            let t = width - 3;
            Ok(Sample {
                x: Tensor::new(vec![n, t], chans.into_values().flatten().collect())?,
                target: Target::Class(class),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SeriesDataset::new(TaskKind::Classification, samples)
}

pub fn export_classification_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let t = ds.seq_len();
    let mut header = vec!["sample_id".to_string(), "class".into(), "channel".into()];
    header.extend((0..t).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let class = match s.target {
            Target::Class(c) => c,
            _ => return Err(Error::Input(format!("sample {i} has no class label"))),
        };
        for c in 0..ds.n_channels() {
            let mut row = vec![i.to_string(), class.to_string(), c.to_string()];
            row.extend(s.x.data()[c * t..(c + 1) * t].iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Plain `key=value` dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub task: TaskKind,
    pub n_channels: usize,
    pub split_train_end: usize,
    pub horizon: usize,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                row: i + 1,
                column: 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Config(format!("manifest is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest `{k}` is not an integer")))
        };
        for k in kv.keys() {
            if !["task", "n_channels", "split_train_end", "horizon"].contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown manifest key `{k}`")));
            }
        }
        Ok(Self {
            task: get("task")?.parse()?,
            n_channels: num("n_channels")?,
            split_train_end: num("split_train_end")?,
            horizon: if kv.contains_key("horizon") { num("horizon")? } else { 0 },
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        format!(
            "task={}\nn_channels={}\nsplit_train_end={}\nhorizon={}\n",
            self.task.as_str(),
            self.n_channels,
            self.split_train_end,
            self.horizon
        )
    }
}

/// Class `c` samples: `sin(2 pi f_c t / T + phi) + N(0, sigma^2)`, one channel.
pub fn synth_classification(
    n_per_class: usize,
    len: usize,
    freqs: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<SeriesDataset> {
    if freqs.len() < 2 || n_per_class == 0 || len == 0 {
        return Err(Error::Input(
            "need at least two classes, one sample per class and a positive length".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Input(e.to_string()))?;
    let mut samples = Vec::with_capacity(n_per_class * freqs.len());
    for (c, &f) in freqs.iter().enumerate() {
        for _ in 0..n_per_class {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let x = (0..len)
                .map(|t| {
                    let clean = (std::f64::consts::TAU * f * t as f64 / len as f64 + phase).sin();
                    clean + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }
                })
                .collect();
            samples.push(Sample {
                x: Tensor::new(vec![1, len], x)?,
                target: Target::Class(c),
            });
        }
    }
    SeriesDataset::new(TaskKind::Classification, samples)
}

/// Sum of sines with optional noise, `n_channels` channels with staggered phases.
pub fn synth_sine(
    len: usize,
    n_channels: usize,
    period: f64,
    sigma: f64,
    seed: u64,
) -> Result<Series> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Input(e.to_string()))?;
    let mut data = Vec::with_capacity(len * n_channels);
    for c in 0..n_channels {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let p2 = period * (1.7 + 0.3 * c as f64);
        for t in 0..len {
            let w = std::f64::consts::TAU * t as f64;
            let clean = (w / period + phase).sin() + 0.5 * (w / p2 + 0.5 * phase).sin();
            data.push(clean + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 });
        }
    }
    Series::new(Tensor::new(vec![n_channels, len], data)?, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSignal {
    pub period: f64,
    pub amplitude: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    /// Point spikes at chosen (`positions`) or random (`count`) indices.
    pub count: usize,
    #[serde(default)]
    pub positions: Vec<usize>,
    /// Spike magnitude in units of the base noise level (or of the amplitude
    /// when the base is noiseless).
    pub amplitude_sigma: f64,
    #[serde(default)]
    pub level_shifts: usize,
    #[serde(default = "default_shift_len")]
    pub shift_len: usize,
}

fn default_shift_len() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub start: usize,
    pub len: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalySeries {
    pub series: Series,
    pub base: Vec<f64>,
    pub injections: Vec<Injection>,
}

impl AnomalySeries {
    /// Base signal recovered by subtracting the recorded injections.
    pub fn remove_injections(&self) -> Vec<f64> {
        let mut x = self.series.values.data().to_vec();
        for inj in &self.injections {
            for v in &mut x[inj.start..inj.start + inj.len] {
                *v -= inj.delta;
            }
        }
        x
    }
}

/// Univariate sine with noise plus injected spikes and level shifts.
pub fn synth_anomaly(len: usize, base: &BaseSignal, spikes: &SpikeSpec, seed: u64) -> Result<AnomalySeries> {
    if len == 0 {
        return Err(Error::Input("series length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, base.noise.max(0.0)).map_err(|e| Error::Input(e.to_string()))?;
    let clean: Vec<f64> = (0..len)
        .map(|t| {
            let v = base.amplitude * (std::f64::consts::TAU * t as f64 / base.period).sin();
            v + if base.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 }
        })
        .collect();
    let unit = if base.noise > 0.0 { base.noise } else { base.amplitude };
    let mut labels = vec![0u8; len];
    let mut x = clean.clone();
    let mut injections = Vec::new();
    let mut positions = spikes.positions.clone();
    let margin = 2.min(len / 2);
    while positions.len() < spikes.count.max(spikes.positions.len()) {
        let p = rng.random_range(margin..len - margin);
        if positions.iter().all(|&q: &usize| q.abs_diff(p) > 4) {
            positions.push(p);
        }
    }
    for &p in &positions {
        if p >= len {
            return Err(Error::Input(format!("spike position {p} outside length {len}")));
        }
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let delta = sign * spikes.amplitude_sigma * unit;
        x[p] += delta;
        labels[p] = 1;
        injections.push(Injection {
            start: p,
            len: 1,
            delta,
        });
    }
    for _ in 0..spikes.level_shifts {
        let l = spikes.shift_len.min(len);
        let start = rng.random_range(0..=len - l);
        let delta = spikes.amplitude_sigma * unit * 0.5;
        for t in start..start + l {
            x[t] += delta;
            labels[t] = 1;
        }
        injections.push(Injection { start, len: l, delta });
    }
    Ok(AnomalySeries {
        series: Series::new(Tensor::new(vec![1, len], x)?, Some(labels))?,
        base: clean,
        injections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: &str, schema: &CsvSchema) -> Result<Series> {
        read_csv(rows.as_bytes(), schema)
    }

    #[test]
    fn csv_shapes_and_errors() {
        let mut text = String::from("a,b,c\n");
        for t in 0..10 {
            text += &format!("{t},{},{}\n", t * 2, t * 3);
        }
        let s = series(
            &text,
            &CsvSchema {
                has_header: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((s.channels(), s.len()), (3, 10));
        assert_eq!(s.channel(1)[4], 8.0);

        let bad = series("1,2\n3,x\n", &CsvSchema::default()).unwrap_err();
        assert!(matches!(bad, Error::Parse { row: 2, column: 2, .. }), "{bad}");
        let ragged = series("1,2\n3\n", &CsvSchema::default()).unwrap_err();
        assert!(matches!(ragged, Error::Parse { row: 2, .. }));
        assert!(series("1,nan\n", &CsvSchema::default()).is_err());
    }

    #[test]
    fn csv_timestamp_and_label_columns() {
        let schema = CsvSchema {
            has_header: true,
            timestamp: true,
            label: true,
        };
        let s = series("ts,label,x\n2020,0,1.5\n2021,1,2.5\n", &schema).unwrap();
        assert_eq!(s.values.data(), &[1.5, 2.5]);
        assert_eq!(s.labels.unwrap(), vec![0, 1]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let a = synth_anomaly(
            40,
            &BaseSignal {
                period: 10.0,
                amplitude: 1.0,
                noise: 0.1,
            },
            &SpikeSpec {
                count: 2,
                positions: vec![],
                amplitude_sigma: 10.0,
                level_shifts: 0,
                shift_len: 5,
            },
            3,
        )
        .unwrap();
        export_csv(&a.series, &path).unwrap();
        let back = load_csv(
            &path,
            &CsvSchema {
                has_header: true,
                timestamp: false,
                label: true,
            },
        )
        .unwrap();
        assert_eq!(back, a.series);
    }

    #[test]
    fn zscore_properties() {
        let ds = SeriesDataset::new(
            TaskKind::Classification,
            vec![Sample {
                x: Tensor::new(vec![2, 3], vec![2.0, 4.0, 6.0, 5.0, 5.0, 5.0]).unwrap(),
                target: Target::Class(0),
            }],
        )
        .unwrap();
        let (tr, _) = zscore_normalize(&ds, &ds).unwrap();
        let x = tr.samples[0].x.data();
        let m = (x[0] + x[1] + x[2]) / 3.0;
        let v = x[..3].iter().map(|a| (a - m).powi(2)).sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert_eq!(&x[3..], &[0.0, 0.0, 0.0]);
        let stats = tr.stats.as_ref().unwrap();
        assert!(stats.constant[1]);
        let back = stats.invert(&tr.samples[0].x).unwrap();
        assert!(back.max_abs_diff(&ds.samples[0].x) < 1e-10);
    }

    #[test]
    fn test_split_does_not_move_statistics() {
        let train = synth_classification(5, 16, &[1.0, 3.0], 0.2, 1).unwrap();
        let a = synth_classification(5, 16, &[1.0, 3.0], 0.2, 2).unwrap();
        let mut b = a.clone();
        for s in &mut b.samples {
            s.x = s.x.map(|v| v * 100.0 + 7.0);
        }
        let (ta, _) = zscore_normalize(&train, &a).unwrap();
        let (tb, _) = zscore_normalize(&train, &b).unwrap();
        assert_eq!(
            ta.stats.unwrap().checksum(),
            tb.stats.unwrap().checksum()
        );
    }

    #[test]
    fn window_counts_and_coverage() {
        let s = Series::new(
            Tensor::new(vec![1, 10], (0..10).map(f64::from).collect()).unwrap(),
            None,
        )
        .unwrap();
        let spec = WindowSpec {
            lookback: 4,
            horizon: 2,
            stride: 1,
        };
        let w = sliding_windows(&s, &spec).unwrap();
        assert_eq!(w.len(), 5);
        for (i, smp) in w.samples.iter().enumerate() {
            assert_eq!(smp.x.data()[0], i as f64);
        }
        let one = sliding_windows(
            &s,
            &WindowSpec {
                lookback: 4,
                horizon: 2,
                stride: 10,
            },
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        assert!(sliding_windows(
            &s,
            &WindowSpec {
                lookback: 9,
                horizon: 2,
                stride: 1
            }
        )
        .is_err());
    }

    #[test]
    fn synthetic_classes_are_balanced_and_deterministic() {
        let a = synth_classification(7, 32, &[2.0, 5.0, 9.0], 0.0, 11).unwrap();
        let b = synth_classification(7, 32, &[2.0, 5.0, 9.0], 0.0, 11).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            let n = a.samples.iter().filter(|s| s.target == Target::Class(c)).count();
            assert_eq!(n, 7);
        }
        // noiseless: all power in the class bin
        for s in &a.samples {
            let spec = crate::spectral::fft::rfft(s.x.data());
            let peak = (0..spec.len())
                .max_by(|&i, &j| spec[i].norm().total_cmp(&spec[j].norm()))
                .unwrap();
            let Target::Class(c) = s.target else { panic!() };
            assert_eq!(peak as f64, [2.0, 5.0, 9.0][c]);
        }
    }

    #[test]
    fn anomaly_injection_is_recorded_and_reversible() {
        let base = BaseSignal {
            period: 20.0,
            amplitude: 1.0,
            noise: 0.1,
        };
        let none = synth_anomaly(
            100,
            &base,
            &SpikeSpec {
                count: 0,
                positions: vec![],
                amplitude_sigma: 10.0,
                level_shifts: 0,
                shift_len: 5,
            },
            1,
        )
        .unwrap();
        assert!(none.series.labels.as_ref().unwrap().iter().all(|&l| l == 0));

        let one = synth_anomaly(
            100,
            &base,
            &SpikeSpec {
                count: 1,
                positions: vec![50],
                amplitude_sigma: 10.0,
                level_shifts: 1,
                shift_len: 5,
            },
            1,
        )
        .unwrap();
        let labels = one.series.labels.as_ref().unwrap();
        assert_eq!(labels[50], 1);
        let back = one.remove_injections();
        assert!(back.iter().zip(&one.base).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_spike_labels_only_its_index() {
        let a = synth_anomaly(
            100,
            &BaseSignal {
                period: 20.0,
                amplitude: 1.0,
                noise: 0.1,
            },
            &SpikeSpec {
                count: 1,
                positions: vec![50],
                amplitude_sigma: 10.0,
                level_shifts: 0,
                shift_len: 5,
            },
            4,
        )
        .unwrap();
        let l = a.series.labels.unwrap();
        assert_eq!(l.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(l[50], 1);
        assert!((a.injections[0].delta.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_split_keeps_class_ratios() {
        let ds = synth_classification(10, 8, &[1.0, 2.0], 0.1, 0).unwrap();
        let (tr, te) = stratified_split(&ds, 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (16, 4));
        let c = ds.classes(&te).unwrap();
        assert_eq!(c.iter().filter(|&&k| k == 0).count(), 2);
    }

    #[test]
    fn manifest_round_trip_and_strictness() {
        let m = Manifest {
            task: TaskKind::Forecasting,
            n_channels: 2,
            split_train_end: 80,
            horizon: 16,
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(Manifest::parse("task=forecasting\nn_channels=1\nsplit_train_end=3\nbogus=1").is_err());
        assert!(Manifest::parse("task=weather\nn_channels=1\nsplit_train_end=3").is_err());
    }

    #[test]
    fn classification_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let ds = synth_classification(3, 12, &[1.0, 4.0], 0.3, 9).unwrap();
        export_classification_csv(&ds, &path).unwrap();
        let back = load_classification_csv(&path).unwrap();
        assert_eq!(back, ds);
    }
}
