//! The assembled network: patch embedding, `L` pre-norm layers of
//! (spectral module, fusion module), and task heads.
//!
//! Internally the state is `[R, D, Z]` with `R = samples * variates`; every
//! variate flows through the shared trunk independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::embedding::{patchify, PatchConfig, PatchEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{IfmConfig, InformationFusionModule};
use crate::layers::{LayerNorm, Linear};
use crate::spectral::{AdaptiveSpectralModule, AsmBranches, SpectralConfig};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Forecasting { horizon: usize },
    Anomaly,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "classification",
            Task::Forecasting { .. } => "forecasting",
            Task::Anomaly => "anomaly",
        }
    }
}

/// Output heads. `Reconstruction` serves both pretraining and anomaly scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classification,
    Forecasting,
    Reconstruction,
}

impl From<Task> for HeadKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Classification { .. } => HeadKind::Classification,
            Task::Forecasting { .. } => HeadKind::Forecasting,
            Task::Anomaly => HeadKind::Reconstruction,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub no_asm: bool,
    #[serde(default)]
    pub no_asm_fourier: bool,
    #[serde(default)]
    pub no_asm_threshold: bool,
    #[serde(default)]
    pub no_asm_wavelet: bool,
    #[serde(default)]
    pub no_ifm: bool,
    #[serde(default)]
    pub no_pretrain: bool,
}

impl Ablation {
    pub fn branches(&self) -> AsmBranches {
        AsmBranches {
            fourier: !self.no_asm_fourier,
            threshold: !self.no_asm_threshold,
            wavelet: !self.no_asm_wavelet,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTokenPolicy {
    #[default]
    Zero,
    LearnableToken,
}

fn default_layers() -> usize {
    2
}
fn default_percentile() -> f64 {
    99.0
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusADConfig {
    /// Input length `T` per sample.
    pub seq_len: usize,
    #[serde(default = "default_one")]
    pub n_vars: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub patch: PatchConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub ifm: IfmConfig,
    pub task: Task,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub mask_token: MaskTokenPolicy,
    /// Calibration percentile for the anomaly threshold.
    #[serde(default = "default_percentile")]
    pub anomaly_percentile: f64,
}

impl FusADConfig {
    pub fn new(seq_len: usize, n_vars: usize, task: Task) -> Self {
        Self {
            seq_len,
            n_vars,
            layers: default_layers(),
            patch: PatchConfig::default(),
            spectral: SpectralConfig::default(),
            ifm: IfmConfig::default(),
            task,
            ablation: Ablation::default(),
            mask_token: MaskTokenPolicy::default(),
            anomaly_percentile: default_percentile(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.patch.num_patches(self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.spectral.validate()?;
        self.ifm.validate()?;
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.seq_len == 0 || self.n_vars == 0 {
            return Err(Error::Config("seq_len and n_vars must be positive".into()));
        }
        match self.task {
            Task::Classification { classes } if classes < 2 => {
                return Err(Error::Config("classification needs at least 2 classes".into()))
            }
            Task::Forecasting { horizon: 0 } => {
                return Err(Error::Config("forecast horizon must be positive".into()))
            }
            _ => {}
        }
        let a = &self.ablation;
        if !a.no_asm && a.no_asm_fourier && a.no_asm_wavelet {
            return Err(Error::Config(
                "no_asm_fourier together with no_asm_wavelet leaves an empty spectral module; use no_asm"
                    .into(),
            ));
        }
        if !a.no_asm && a.branches().fourier && self.tokens() < 2 {
            return Err(Error::Config(format!(
                "the Fourier branch needs at least 2 patches, got {}",
                self.tokens()
            )));
        }
        if !(0.0..=100.0).contains(&self.anomaly_percentile) {
            return Err(Error::Config("anomaly_percentile must lie in [0, 100]".into()));
        }
        Ok(())
    }

    fn head_scalars(&self, kind: HeadKind) -> usize {
        let d = self.patch.embed_dim;
        match (kind, self.task) {
            (HeadKind::Reconstruction, _) => d * self.patch.patch_len + self.patch.patch_len,
            (HeadKind::Classification, Task::Classification { classes }) => {
                self.n_vars * d * classes + classes
            }
            (HeadKind::Forecasting, Task::Forecasting { horizon }) => {
                d * self.tokens() * horizon + horizon
            }
            _ => 0,
        }
    }

    /// Parameter count implied by the configuration alone.
    pub fn expected_num_scalars(&self) -> usize {
        let d = self.patch.embed_dim;
        let b = self.patch.patch_len;
        let z = self.tokens();
        let mut n = b * d + d + z * d;
        if self.mask_token == MaskTokenPolicy::LearnableToken {
            n += d;
        }
        let mut layer = 4 * d;
        if !self.ablation.no_asm {
            let br = self.ablation.branches();
            layer += br.count() * d * d + d;
            if br.has_thresholds() {
                layer += 2;
            }
        }
        if !self.ablation.no_ifm {
            layer += self.ifm.num_scalars(d);
        }
        n += self.layers * layer;
        n += self.head_scalars(HeadKind::Reconstruction);
        if self.task != Task::Anomaly {
            n += self.head_scalars(self.task.into());
        }
        n
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub ln_asm: LayerNorm,
    pub asm: Option<AdaptiveSpectralModule>,
    pub ln_ifm: LayerNorm,
    pub ifm: Option<InformationFusionModule>,
}

#[derive(Clone, Debug)]
pub struct FusAD {
    pub cfg: FusADConfig,
    pub store: ParamStore,
    pub embed: PatchEmbedding,
    pub mask_token: Option<ParamId>,
    pub layers: Vec<Layer>,
    pub recon_head: Linear,
    pub cls_head: Option<Linear>,
    pub fore_head: Option<Linear>,
    calibrated: bool,
    rng: ChaCha8Rng,
}

/// Trunk names shared between pretraining and fine-tuning.
pub fn is_trunk_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("layer") || name == "mask_token"
}

impl FusAD {
    pub fn new(cfg: FusADConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.patch.embed_dim;
        let z = cfg.tokens();
        let embed = PatchEmbedding::new(&mut store, "embed", &cfg.patch, z, &mut rng)?;
        let mask_token = match cfg.mask_token {
            MaskTokenPolicy::Zero => None,
            MaskTokenPolicy::LearnableToken => {
                Some(store.add("mask_token", Tensor::randn(&[d], 0.02, &mut rng))?)
            }
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("layer{i}");
            let ln_asm = LayerNorm::new(&mut store, &format!("{p}.ln_asm"), d, 1)?;
            let asm = if cfg.ablation.no_asm {
                None
            } else {
                Some(AdaptiveSpectralModule::new(
                    &mut store,
                    &format!("{p}.asm"),
                    &cfg.spectral,
                    cfg.ablation.branches(),
                    z,
                    d,
                    &mut rng,
                )?)
            };
            let ln_ifm = LayerNorm::new(&mut store, &format!("{p}.ln_ifm"), d, 1)?;
            let ifm = if cfg.ablation.no_ifm {
                None
            } else {
                Some(InformationFusionModule::new(
                    &mut store,
                    &format!("{p}.ifm"),
                    &cfg.ifm,
                    d,
                    &mut rng,
                )?)
            };
            layers.push(Layer {
                ln_asm,
                asm,
                ln_ifm,
                ifm,
            });
        }
        let recon_head = Linear::new(&mut store, "head.recon", d, cfg.patch.patch_len, &mut rng)?;
        let mut model = Self {
            cfg,
            store,
            embed,
            mask_token,
            layers,
            recon_head,
            cls_head: None,
            fore_head: None,
            calibrated: false,
            rng,
        };
        if model.cfg.task != Task::Anomaly {
            model.attach_head(model.cfg.task)?;
        }
        Ok(model)
    }

    /// Add the head for `task` if it is not present yet.
    pub fn attach_head(&mut self, task: Task) -> Result<()> {
        let d = self.cfg.patch.embed_dim;
        match task {
            Task::Classification { classes } if self.cls_head.is_none() => {
                self.cls_head = Some(Linear::new(
                    &mut self.store,
                    "head.cls",
                    self.cfg.n_vars * d,
                    classes,
                    &mut self.rng,
                )?);
            }
            Task::Forecasting { horizon } if self.fore_head.is_none() => {
                self.fore_head = Some(Linear::new(
                    &mut self.store,
                    "head.fore",
                    d * self.cfg.tokens(),
                    horizon,
                    &mut self.rng,
                )?);
            }
            _ => {}
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.cfg.n_vars || s[2] != self.cfg.seq_len {
            return Err(Error::shape(format!(
                "model expects [S, {}, {}], got {s:?}",
                self.cfg.n_vars, self.cfg.seq_len
            )));
        }
        if !x.is_finite() {
            return Err(Error::non_finite("model input"));
        }
        Ok(())
    }

    /// Embedded tokens `[R, D, Z]`; `keep` is `[R, Z, 1]` with 0 on masked patches.
    fn embed<'t>(&self, tape: &'t Tape, x: &Tensor, keep: Option<&Tensor>) -> Result<Var<'t>> {
        self.check_input(x)?;
        let patches = tape.constant(patchify(x, &self.cfg.patch)?);
        let token = self.mask_token.map(|id| tape.param(&self.store, id));
        self.embed
            .forward_masked(tape, &self.store, patches, keep, token)?
            .swap_last2()
    }

    fn layer_forward<'t>(
        &self,
        tape: &'t Tape,
        layer: &Layer,
        h: Var<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        let a = layer.ln_asm.forward(tape, &self.store, h)?;
        let h = match &layer.asm {
            Some(m) => h.add(m.delta(tape, &self.store, a, training)?)?,
            None => a,
        };
        let c = layer.ln_ifm.forward(tape, &self.store, h)?;
        match &layer.ifm {
            Some(m) if m.config().residual => h.add(m.delta(tape, &self.store, c)?),
            Some(m) => m.delta(tape, &self.store, c),
            None => Ok(c),
        }
    }

    /// Trunk output `[R, D, Z]`.
    pub fn trunk<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        keep: Option<&Tensor>,
        training: bool,
    ) -> Result<Var<'t>> {
        let mut h = self.embed(tape, x, keep)?;
        for layer in &self.layers {
            h = self.layer_forward(tape, layer, h, training)?;
        }
        if !h.value().is_finite() {
            return Err(Error::non_finite("trunk output"));
        }
        Ok(h)
    }

    /// Set each layer's spectral thresholds from the data reaching it.
    pub fn calibrate(&mut self, x: &Tensor) -> Result<()> {
        for i in 0..self.layers.len() {
            let ln_out = {
                let tape = Tape::new();
                let mut h = self.embed(&tape, x, None)?;
                for layer in &self.layers[..i] {
                    h = self.layer_forward(&tape, layer, h, false)?;
                }
                let out = self.layers[i].ln_asm.forward(&tape, &self.store, h)?.value();
                (*out).clone()
            };
            if let Some(asm) = &self.layers[i].asm {
                asm.calibrate_thresholds(&mut self.store, &ln_out)?;
            }
        }
        self.calibrated = true;
        Ok(())
    }

    fn head_output<'t>(&self, tape: &'t Tape, h: Var<'t>, head: HeadKind, samples: usize) -> Result<Var<'t>> {
        let n = self.cfg.n_vars;
        let d = self.cfg.patch.embed_dim;
        let z = self.cfg.tokens();
        match head {
            HeadKind::Reconstruction => {
                let b = self.cfg.patch.patch_len;
                let t = self.cfg.seq_len;
                let y = self.recon_head.forward(tape, &self.store, h.swap_last2()?)?;
                y.reshape(&[samples * n, z * b])?
                    .slice(1, 0, t)?
                    .reshape(&[samples, n, t])
            }
            HeadKind::Classification => {
                let head = self.cls_head.as_ref().ok_or_else(|| missing_head("classification"))?;
                let pooled = h.mean_axis(2)?.reshape(&[samples, n * d])?;
                head.forward(tape, &self.store, pooled)
            }
            HeadKind::Forecasting => {
                let head = self.fore_head.as_ref().ok_or_else(|| missing_head("forecasting"))?;
                let flat = h.reshape(&[samples * n, d * z])?;
                let y = head.forward(tape, &self.store, flat)?;
                y.reshape(&[samples, n, head.d_out])
            }
        }
    }

    /// Run the trunk and `head` on `x` (`[S, N, T]`).
    ///
    /// Outputs: logits `[S, k]`, forecasts `[S, N, h]`, or reconstructions `[S, N, T]`.
    pub fn forward_head<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        head: HeadKind,
        keep: Option<&Tensor>,
        training: bool,
    ) -> Result<Var<'t>> {
        let samples = x.shape().first().copied().unwrap_or(0);
        let h = self.trunk(tape, x, keep, training)?;
        self.head_output(tape, h, head, samples)
    }

    /// Forward through the head of the configured task.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor, training: bool) -> Result<Var<'t>> {
        self.forward_head(tape, x, self.cfg.task.into(), None, training)
    }

    /// Forward for an explicitly requested task, which must match the configuration.
    pub fn forward_task<'t>(&self, tape: &'t Tape, x: &Tensor, task: Task, training: bool) -> Result<Var<'t>> {
        if task.name() != self.cfg.task.name() {
            return Err(Error::Config(format!(
                "model is configured for {}, not {}",
                self.cfg.task.name(),
                task.name()
            )));
        }
        self.forward(tape, x, training)
    }

    /// Reconstruction with the given patches hidden.
    pub fn reconstruct(&self, x: &Tensor, keep: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let y = self.forward_head(&tape, x, HeadKind::Reconstruction, keep, false)?;
        Ok((*y.value()).clone())
    }

    /// Per-timestep anomaly scores `[S, T]`.
    ///
    /// Each patch is reconstructed once while hidden (alternating patches over
    /// two passes); the score is the squared error averaged over variates.
    pub fn anomaly_scores(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (s, n, t) = (x.shape()[0], self.cfg.n_vars, self.cfg.seq_len);
        let z = self.cfg.tokens();
        let b = self.cfg.patch.patch_len;
        let mut scores = vec![0.0; s * t];
        let passes = if z >= 2 { 2 } else { 1 };
        for pass in 0..passes {
            let keep: Vec<f64> = (0..s * n)
                .flat_map(|_| (0..z).map(|i| if passes == 2 && i % 2 != pass { 1.0 } else { 0.0 }))
                .collect();
            let keep = Tensor::new(vec![s * n, z, 1], keep)?;
            let rec = self.reconstruct(x, Some(&keep))?;
            for si in 0..s {
                for tt in 0..t {
                    if passes == 2 && (tt / b) % 2 != pass {
                        continue;
                    }
                    let mut acc = 0.0;
                    for v in 0..n {
                        let k = (si * n + v) * t + tt;
                        let e = rec.data()[k] - x.data()[k];
                        acc += e * e;
                    }
                    scores[si * t + tt] = acc / n as f64;
                }
            }
        }
        Tensor::new(vec![s, t], scores)
    }

    /// Scale the update paths of layer `index` by `factor`.
    ///
    /// With a small factor the layer contributes little beyond its residual
    /// connections; its spectral gate is reset to all-pass.
    pub fn damp_layer(&mut self, index: usize, factor: f64) -> Result<()> {
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::Config(format!("no layer {index}")))?
            .clone();
        let mut scale = |id: ParamId| {
            for v in self.store.get_mut(id).value.data_mut() {
                *v *= factor;
            }
        };
        if let Some(asm) = &layer.asm {
            scale(asm.projection().weight);
            scale(asm.projection().bias);
        }
        if let Some(ifm) = &layer.ifm {
            scale(ifm.out.weight);
            scale(ifm.out.bias);
        }
        if let Some(asm) = &layer.asm {
            if asm.threshold_params().is_some() {
                asm.set_thresholds(&mut self.store, -60.0, 60.0)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.store,
            serde_json::to_value(&self.cfg).expect("config is serializable"),
            serde_json::json!({ "calibrated": self.calibrated }),
        )
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuild a model from a checkpoint, restoring every parameter.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: FusADConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Load(format!("config in checkpoint: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        if ck.params.len() != model.store.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {} parameters, model expects {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        ck.load_into(&mut model.store, |_| true)?;
        model.calibrated = ck.meta.get("calibrated").and_then(|v| v.as_bool()).unwrap_or(true);
        Ok(model)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Copy the trunk (embedding, layers, mask token) from a checkpoint; heads
    /// keep their fresh initialization.
    pub fn load_trunk(&mut self, ck: &Checkpoint) -> Result<usize> {
        let expected = self
            .store
            .iter()
            .filter(|(_, p)| is_trunk_param(&p.name))
            .count();
        let copied = ck.load_into(&mut self.store, is_trunk_param)?;
        if copied != expected {
            return Err(Error::Load(format!(
                "checkpoint trunk has {copied} parameters, model trunk has {expected}"
            )));
        }
        self.calibrated = ck.meta.get("calibrated").and_then(|v| v.as_bool()).unwrap_or(true);
        Ok(copied)
    }
}

fn missing_head(kind: &str) -> Error {
    Error::Config(format!("model has no {kind} head"))
}
