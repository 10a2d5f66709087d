//! Command-line front end: run configuration, dataset loading, and the
//! `pretrain`, `finetune`, `eval`, `denoise` and `synth` commands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    export_classification_csv, export_csv, load_classification_csv, load_csv, sliding_windows,
    stratified_split, synth_anomaly, synth_classification, synth_sine, zscore_normalize,
    BaseSignal, CsvSchema, Manifest, SeriesDataset, SpikeSpec, TaskKind, WindowSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{percentile, MetricReport};
use crate::model::{FusAD, FusADConfig, Task};
use crate::spectral::{adaptive_mask, fft, FrequencyRepr};
use crate::tensor::Tensor;
use crate::training::{evaluate, finetune, pretrain, EpochRecord, MaskSpec, TrainConfig};

pub const SEED_ENV: &str = "FUSAD_SEED";

/// `seed`, unless `FUSAD_SEED` is set.
pub fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

/// Dataset location. The manifest defaults to `<path>.manifest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Fraction of the training side held out for validation and anomaly
    /// threshold calibration.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl DataConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| {
            let mut p = self.path.clone().into_os_string();
            p.push(".manifest");
            p.into()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: FusADConfig,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Window stride for series corpora; lookback and horizon follow the model.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Read a TOML run configuration and apply the `FUSAD_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.seed = seed_override(cfg.seed)?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.train.validate()?;
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) || self.data.val_fraction == 0.0 {
            return Err(Error::Config("data.val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is serializable")
    }

    fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)?;
        std::fs::write(self.output_dir.join("resolved_config.toml"), self.to_toml())?;
        Ok(())
    }
}

/// Train, validation (or calibration) and test splits, normalized with
/// statistics fitted on the training side.
#[derive(Clone, Debug)]
pub struct Splits {
    pub manifest: Manifest,
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
}

fn task_kind(task: Task) -> TaskKind {
    match task {
        Task::Classification { .. } => TaskKind::Classification,
        Task::Forecasting { .. } => TaskKind::Forecasting,
        Task::Anomaly => TaskKind::Anomaly,
    }
}

fn tail_split(ds: &SeriesDataset, frac: f64) -> Result<(SeriesDataset, SeriesDataset)> {
    let n = ds.len();
    let held = ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(Error::Input("training side needs at least two windows".into()));
    }
    let cut = n - held;
    Ok((
        ds.subset(&(0..cut).collect::<Vec<_>>()),
        ds.subset(&(cut..n).collect::<Vec<_>>()),
    ))
}

fn normalize3(
    train: SeriesDataset,
    val: SeriesDataset,
    test: SeriesDataset,
) -> Result<(SeriesDataset, SeriesDataset, SeriesDataset)> {
    let (tr, va) = zscore_normalize(&train, &val)?;
    let (_, te) = zscore_normalize(&train, &test)?;
    Ok((tr, va, te))
}

/// Load the dataset named by `cfg` and split it for `cfg.model.task`.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let manifest_path = cfg.data.manifest_path();
    let manifest = Manifest::load(&manifest_path)?;
    let task = cfg.model.task;
    if manifest.task != task_kind(task) {
        return Err(Error::Config(format!(
            "model task is {} but manifest {} declares {}",
            task.name(),
            manifest_path.display(),
            manifest.task.as_str()
        )));
    }
    let (train, val, test) = match task {
        Task::Classification { .. } => {
            let ds = load_classification_csv(&cfg.data.path)?;
            let cut = manifest.split_train_end.min(ds.len());
            let train_all = ds.subset(&(0..cut).collect::<Vec<_>>());
            let test = ds.subset(&(cut..ds.len()).collect::<Vec<_>>());
            let (tr, va) = stratified_split(&train_all, 1.0 - cfg.data.val_fraction, cfg.seed)?;
            (train_all.subset(&tr), train_all.subset(&va), test)
        }
        Task::Forecasting { .. } | Task::Anomaly => {
            let series = load_csv(
                &cfg.data.path,
                &CsvSchema {
                    has_header: true,
                    timestamp: false,
                    label: task == Task::Anomaly,
                },
            )?;
            let (train_s, test_s) = series.split_at(manifest.split_train_end)?;
            let horizon = match task {
                Task::Forecasting { horizon } => horizon,
                _ => 0,
            };
            if task != Task::Anomaly && manifest.horizon != horizon {
                return Err(Error::Config(format!(
                    "model horizon {horizon} differs from manifest horizon {}",
                    manifest.horizon
                )));
            }
            let spec = WindowSpec {
                lookback: cfg.model.seq_len,
                horizon,
                stride: cfg.stride,
            };
            // anomaly test windows tile the series so every timestep is scored once
            let test_spec = if task == Task::Anomaly {
                WindowSpec {
                    stride: cfg.model.seq_len,
                    ..spec
                }
            } else {
                spec
            };
            let all = sliding_windows(&train_s, &spec)?;
            let (tr, va) = tail_split(&all, cfg.data.val_fraction)?;
            (tr, va, sliding_windows(&test_s, &test_spec)?)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("dataset yields an empty training or test split".into()));
    }
    if train.n_channels() != cfg.model.n_vars || train.seq_len() != cfg.model.seq_len {
        return Err(Error::Config(format!(
            "model expects {} channels of length {}, data has {} of length {}",
            cfg.model.n_vars,
            cfg.model.seq_len,
            train.n_channels(),
            train.seq_len()
        )));
    }
    let (train, val, test) = normalize3(train, val, test)?;
    Ok(Splits {
        manifest,
        train,
        val,
        test,
    })
}

fn write_trace(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let text: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    std::fs::write(path, text)?;
    Ok(())
}

fn check_data_path(cfg: &RunConfig) -> Result<()> {
    if !cfg.data.path.exists() {
        return Err(Error::Input(format!("dataset not found: {}", cfg.data.path.display())));
    }
    Ok(())
}

/// Masked-reconstruction pretraining on the training split.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<EpochRecord>> {
    check_data_path(cfg)?;
    let splits = load_splits(cfg)?;
    cfg.write_resolved()?;
    let mut model = FusAD::new(cfg.model.clone(), cfg.seed)?;
    let pre = unlabelled(&splits.train);
    let records = pretrain(&mut model, &pre, &cfg.mask, &cfg.train)?;
    write_trace(&cfg.output_dir.join("pretrain_trace.jsonl"), &records)?;
    model.save(cfg.output_dir.join("pretrain.ckpt"))?;
    Ok(records)
}

/// Inputs of `ds` as an unlabelled (anomaly-kind) corpus for pretraining.
fn unlabelled(ds: &SeriesDataset) -> SeriesDataset {
    let mut out = ds.clone();
    out.kind = TaskKind::Anomaly;
    for s in &mut out.samples {
        s.target = crate::data::Target::None;
    }
    out
}

#[derive(Clone, Debug, Default, Args)]
pub struct AblationFlags {
    #[arg(long)]
    pub no_asm: bool,
    #[arg(long)]
    pub no_asm_fourier: bool,
    #[arg(long)]
    pub no_asm_threshold: bool,
    #[arg(long)]
    pub no_asm_wavelet: bool,
    #[arg(long)]
    pub no_ifm: bool,
    #[arg(long)]
    pub no_pretrain: bool,
}

impl AblationFlags {
    pub fn apply(&self, cfg: &mut FusADConfig) {
        let a = &mut cfg.ablation;
        a.no_asm |= self.no_asm;
        a.no_asm_fourier |= self.no_asm_fourier;
        a.no_asm_threshold |= self.no_asm_threshold;
        a.no_asm_wavelet |= self.no_asm_wavelet;
        a.no_ifm |= self.no_ifm;
        a.no_pretrain |= self.no_pretrain;
    }
}

fn check_task_flag(task: Option<TaskKind>, cfg: &RunConfig) -> Result<()> {
    if let Some(kind) = task {
        let manifest = Manifest::load(cfg.data.manifest_path())?;
        if kind != manifest.task || kind != task_kind(cfg.model.task) {
            return Err(Error::Config(format!(
                "--task {} does not match the dataset manifest ({}) and model config ({})",
                kind.as_str(),
                manifest.task.as_str(),
                cfg.model.task.name()
            )));
        }
    }
    Ok(())
}

fn report_with_params(report: MetricReport, model: &FusAD) -> MetricReport {
    report.with("num_params", model.num_scalars() as f64)
}

/// Fine-tune (optionally from a pretrained trunk) and evaluate on the test split.
pub fn cmd_finetune(
    cfg: &RunConfig,
    task: Option<TaskKind>,
    from_checkpoint: Option<&Path>,
    flags: &AblationFlags,
) -> Result<MetricReport> {
    check_data_path(cfg)?;
    check_task_flag(task, cfg)?;
    let mut cfg = cfg.clone();
    flags.apply(&mut cfg.model);
    cfg.validate()?;
    let splits = load_splits(&cfg)?;
    cfg.write_resolved()?;
    let mut model = FusAD::new(cfg.model.clone(), cfg.seed)?;
    if let Some(path) = from_checkpoint.filter(|_| !cfg.model.ablation.no_pretrain) {
        let ck = crate::checkpoint::Checkpoint::load(path)?;
        model.load_trunk(&ck)?;
    }
    let report = finetune(&mut model, &splits.train, &splits.val, &cfg.mask, &cfg.train)?;
    write_trace(&cfg.output_dir.join("finetune_trace.jsonl"), &report.records)?;
    model.save(cfg.output_dir.join("finetune.ckpt"))?;
    let metrics = report_with_params(evaluate(&model, &splits.test, Some(&splits.val), cfg.train.batch_size)?, &model);
    std::fs::write(cfg.output_dir.join("metrics.jsonl"), metrics.to_json_line() + "\n")?;
    Ok(metrics)
}

/// Evaluate a saved model on the test split without writing anything.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricReport> {
    check_data_path(cfg)?;
    let model = FusAD::load(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.model = model.cfg.clone();
    let splits = load_splits(&cfg)?;
    Ok(report_with_params(
        evaluate(&model, &splits.test, Some(&splits.val), cfg.train.batch_size)?,
        &model,
    ))
}

/// Thresholds for `denoise --fit`: the lower edge sits where the largest of
/// `K` exponentially distributed noise bins is expected to fall (with a factor
/// 2 margin), estimating the noise mean from the median; the upper edge clears
/// the strongest bin.
pub fn fit_thresholds(log_power: &[f64]) -> Result<(f64, f64)> {
    let power: Vec<f64> = log_power.iter().map(|v| v.exp()).collect();
    let median = percentile(&power, 50.0)?;
    let k = power.len() as f64;
    let theta1 = (median / std::f64::consts::LN_2 * (2.0 * k).ln()).max(1e-300).ln();
    let theta2 = log_power.iter().copied().fold(f64::MIN, f64::max) + 1.0;
    Ok((theta1, theta2))
}

#[derive(Clone, Debug, Serialize)]
pub struct DenoiseRecord {
    pub channel: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub kept_bins: usize,
    pub total_bins: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_in_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_out_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_gain_db: Option<f64>,
}

pub fn snr_db(clean: &[f64], est: &[f64]) -> f64 {
    let signal: f64 = clean.iter().map(|v| v * v).sum();
    let noise: f64 = clean.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (signal / noise).log10()
}

#[derive(Clone, Debug, Args)]
pub struct DenoiseArgs {
    /// Input series CSV (header row, one column per channel).
    #[arg(long)]
    pub input: PathBuf,
    /// Denoised series CSV.
    #[arg(long)]
    pub output: PathBuf,
    /// Spectrum dump CSV: bin, frequency, power, kept, channel.
    #[arg(long)]
    pub spectrum: Option<PathBuf>,
    /// Clean reference CSV; when given, SNR before and after is reported.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, required_unless_present = "fit")]
    pub theta1: Option<f64>,
    #[arg(long, allow_hyphen_values = true, required_unless_present = "fit")]
    pub theta2: Option<f64>,
    /// Fit thresholds per channel from the noise floor.
    #[arg(long, conflicts_with_all = ["theta1", "theta2"])]
    pub fit: bool,
    /// Apply a Hann window before the transform.
    #[arg(long)]
    pub hanning: bool,
}

fn header_schema() -> CsvSchema {
    CsvSchema {
        has_header: true,
        ..Default::default()
    }
}

/// Hard-gate each channel of a raw series and write the result.
pub fn cmd_denoise(args: &DenoiseArgs) -> Result<Vec<DenoiseRecord>> {
    let series = load_csv(&args.input, &header_schema())?;
    let reference = args
        .reference
        .as_ref()
        .map(|p| load_csv(p, &header_schema()))
        .transpose()?;
    if let Some(r) = &reference {
        if r.values.shape() != series.values.shape() {
            return Err(Error::Input(format!(
                "reference shape {:?} differs from input shape {:?}",
                r.values.shape(),
                series.values.shape()
            )));
        }
    }
    let h = series.len();
    let mut out = Vec::with_capacity(series.values.len());
    let mut records = Vec::new();
    let mut dump = String::from("bin,frequency,power,kept,channel\n");
    for c in 0..series.channels() {
        let x = Tensor::from_vec(series.channel(c).to_vec());
        let repr = FrequencyRepr::from_signal(&x, args.hanning)?;
        let lp = repr.log_power();
        let (theta1, theta2) = if args.fit {
            fit_thresholds(lp.data())?
        } else {
            (args.theta1.unwrap_or(f64::MIN), args.theta2.unwrap_or(f64::MAX))
        };
        if !(theta1 < theta2) {
            return Err(Error::Config(format!("theta1 {theta1} must be below theta2 {theta2}")));
        }
        let kept = adaptive_mask(&repr, theta1, theta2, true, 0.1)?;
        let mut y = fft::irfft_tensor(&kept, h)?;
        if args.hanning {
            y = unwindow(&y)?;
        }
        if !y.is_finite() {
            return Err(Error::non_finite("denoised signal"));
        }
        let flags: Vec<bool> = lp.data().iter().map(|&v| v >= theta1 && v <= theta2).collect();
        for (k, (&p, &f)) in repr.p.data().iter().zip(&flags).enumerate() {
            dump.push_str(&format!("{k},{:?},{p:?},{},{c}\n", k as f64 / h as f64, u8::from(f)));
        }
        let (snr_in, snr_out) = match &reference {
            Some(r) => {
                let clean = r.channel(c);
                (Some(snr_db(clean, x.data())), Some(snr_db(clean, y.data())))
            }
            None => (None, None),
        };
        records.push(DenoiseRecord {
            channel: c,
            theta1,
            theta2,
            kept_bins: flags.iter().filter(|&&f| f).count(),
            total_bins: flags.len(),
            snr_in_db: snr_in,
            snr_out_db: snr_out,
            snr_gain_db: snr_in.zip(snr_out).map(|(a, b)| b - a),
        });
        out.extend_from_slice(y.data());
    }
    let denoised = crate::data::Series::new(Tensor::new(vec![series.channels(), h], out)?, None)?;
    export_csv(&denoised, &args.output)?;
    if let Some(p) = &args.spectrum {
        std::fs::write(p, dump)?;
    }
    Ok(records)
}

/// Undo a Hann window where it is nonzero.
fn unwindow(y: &Tensor) -> Result<Tensor> {
    let w = crate::spectral::hanning(y.len())?;
    let w = w.data();
    let data = y
        .data()
        .iter()
        .zip(w)
        .map(|(v, w)| if *w > 1e-6 { v / w } else { 0.0 })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Sine,
    Classification,
    Anomaly,
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Directory receiving `data.csv` and `data.csv.manifest`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overridden by `FUSAD_SEED` when set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Series length (sine, anomaly) or sample length (classification).
    #[arg(long, default_value_t = 2048)]
    pub length: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 24.0)]
    pub period: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Forecast horizon recorded in the manifest (sine).
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    /// Samples per class (classification).
    #[arg(long, default_value_t = 50)]
    pub samples_per_class: usize,
    /// Cycles per sample for each class (classification).
    #[arg(long, value_delimiter = ',', default_value = "3,6")]
    pub freqs: Vec<f64>,
    /// Number of spikes (anomaly).
    #[arg(long, default_value_t = 8)]
    pub spikes: usize,
    /// Spike size in noise units (anomaly).
    #[arg(long, default_value_t = 10.0)]
    pub spike_sigma: f64,
    /// Fraction of the series or samples on the training side.
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
}

/// Write a synthetic corpus and its manifest; returns the manifest.
pub fn cmd_synth(args: &SynthArgs) -> Result<Manifest> {
    if !(0.0..1.0).contains(&args.train_fraction) || args.train_fraction == 0.0 {
        return Err(Error::Config("--train-fraction must lie in (0, 1)".into()));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let path = args.out_dir.join("data.csv");
    let cut = |n: usize| (n as f64 * args.train_fraction).round() as usize;
    let manifest = match args.kind {
        SynthKind::Sine => {
            let s = synth_sine(args.length, args.channels, args.period, args.sigma, args.seed)?;
            export_csv(&s, &path)?;
            Manifest {
                task: TaskKind::Forecasting,
                n_channels: args.channels,
                split_train_end: cut(args.length),
                horizon: args.horizon,
            }
        }
        SynthKind::Classification => {
            let ds = synth_classification(args.samples_per_class, args.length, &args.freqs, args.sigma, args.seed)?;
            // interleave classes so a prefix split keeps every class on both sides
            let (tr, te) = stratified_split(&ds, args.train_fraction, args.seed)?;
            let order: Vec<usize> = tr.iter().chain(&te).copied().collect();
            export_classification_csv(&ds.subset(&order), &path)?;
            Manifest {
                task: TaskKind::Classification,
                n_channels: 1,
                split_train_end: tr.len(),
                horizon: 0,
            }
        }
        SynthKind::Anomaly => {
            let a = synth_anomaly(
                args.length,
                &BaseSignal {
                    period: args.period,
                    amplitude: 1.0,
                    noise: args.sigma,
                },
                &SpikeSpec {
                    count: args.spikes,
                    positions: vec![],
                    amplitude_sigma: args.spike_sigma,
                    level_shifts: 0,
                    shift_len: 1,
                },
                args.seed,
            )?;
            export_csv(&a.series, &path)?;
            Manifest {
                task: TaskKind::Anomaly,
                n_channels: 1,
                split_train_end: cut(args.length),
                horizon: 0,
            }
        }
    };
    std::fs::write(args.out_dir.join("data.csv.manifest"), manifest.render())?;
    Ok(manifest)
}

#[derive(Debug, Parser)]
#[command(name = "fusad", version, about = "Time-frequency fusion model for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-reconstruction pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune on the configured task and report test metrics.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Spectral gating of a raw CSV signal.
    Denoise(DenoiseArgs),
    /// Generate a synthetic corpus with its manifest.
    Synth(SynthArgs),
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Capacity(_) => 1,
        Error::NonFinite { .. } => 3,
        Error::Shape(_) | Error::Input(_) | Error::Parse { .. } | Error::Load(_) | Error::Io(_) => 2,
    }
}

/// Run a parsed command, printing its line-delimited JSON reports to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config } => {
            for r in cmd_pretrain(&RunConfig::load(&config)?)? {
                println!("{}", r.to_json_line());
            }
        }
        Command::Finetune {
            config,
            task,
            from_checkpoint,
            ablation,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_finetune(&cfg, task, from_checkpoint.as_deref(), &ablation)?;
            println!("{}", report.to_json_line());
        }
        Command::Eval { config, checkpoint } => {
            println!("{}", cmd_eval(&RunConfig::load(&config)?, &checkpoint)?.to_json_line());
        }
        Command::Denoise(args) => {
            for r in cmd_denoise(&args)? {
                println!("{}", serde_json::to_string(&r).expect("record is serializable"));
            }
        }
        Command::Synth(mut args) => {
            args.seed = seed_override(args.seed)?;
            let m = cmd_synth(&args)?;
            println!(
                "{}",
                serde_json::json!({
                    "task": m.task.as_str(),
                    "n_channels": m.n_channels,
                    "split_train_end": m.split_train_end,
                    "horizon": m.horizon,
                })
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[data]
path = "d.csv"
[model]
seq_len = 32
[model.task]
kind = "anomaly"
"#;

    #[test]
    fn config_parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model.seq_len, 32);
        assert_eq!(cfg.mask, MaskSpec::default());
        assert_eq!(cfg.data.manifest_path(), PathBuf::from("d.csv.manifest"));
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["typo = 1\n", "[train]\nlearning_rate = 0.1\n", "[model.patch]\npatchlen = 4\n"] {
            let text = format!("{extra}{MINIMAL}");
            let text = if extra.starts_with('[') { format!("{MINIMAL}{extra}") } else { text };
            assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))), "{extra}");
        }
    }

    #[test]
    fn fitted_thresholds_bracket_a_tone() {
        let h = 256;
        let mut lp = vec![0.0f64; h / 2 + 1];
        for (k, v) in lp.iter_mut().enumerate() {
            *v = (1.0 + (k % 7) as f64 * 0.1).ln();
        }
        lp[10] = 1000f64.ln();
        let (t1, t2) = fit_thresholds(&lp).unwrap();
        assert!(lp[10] > t1 && lp[10] < t2);
        assert!(lp.iter().enumerate().all(|(k, &v)| k == 10 || v < t1));
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Input("x".into())), 2);
        assert_eq!(exit_code(&Error::non_finite("x")), 3);
    }
}
