use rand::Rng;

use super::mask::{gate_on_tape, GateMode, LOG_POWER_FLOOR};
use super::{fft, hanning, SpectralConfig};
use crate::error::{Error, Result};
use crate::layers::Conv1d;
use crate::metrics::percentile;
use crate::tensor::{Padding, ParamId, ParamStore, Tape, Tensor, Var};

/// Which parts of the spectral module are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AsmBranches {
    pub fourier: bool,
    pub threshold: bool,
    pub wavelet: bool,
}

impl Default for AsmBranches {
    fn default() -> Self {
        Self {
            fourier: true,
            threshold: true,
            wavelet: true,
        }
    }
}

impl AsmBranches {
    pub fn count(&self) -> usize {
        usize::from(self.fourier) + usize::from(self.wavelet)
    }

    pub fn has_thresholds(&self) -> bool {
        self.fourier && self.threshold
    }
}

/// Spectral module over a `[B, D, Z]` state: both transforms run along the
/// token axis `Z`, independently per row and embedding channel.
#[derive(Clone, Debug)]
pub struct AdaptiveSpectralModule {
    cfg: SpectralConfig,
    branches: AsmBranches,
    tokens: usize,
    dim: usize,
    window: Option<Tensor>,
    wavelet_kernel: Option<Tensor>,
    theta1: Option<ParamId>,
    theta_gap: Option<ParamId>,
    proj: Conv1d,
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl AdaptiveSpectralModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SpectralConfig,
        branches: AsmBranches,
        tokens: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if branches.count() == 0 {
            return Err(Error::Config(
                "spectral module with neither Fourier nor wavelet branch; disable the module instead"
                    .into(),
            ));
        }
        let window = if branches.fourier && cfg.use_hanning {
            Some(hanning(tokens)?)
        } else {
            None
        };
        let wavelet_kernel = if branches.wavelet {
            let k = cfg.bank(tokens)?.round_trip_kernel();
            Some(Tensor::new(vec![1, 1, k.len()], k)?)
        } else {
            None
        };
        let (theta1, theta_gap) = if branches.has_thresholds() {
            // all-pass until calibrated on data
            let t1 = store.add(format!("{prefix}.theta1"), Tensor::scalar(-60.0))?;
            let gap = store.add(
                format!("{prefix}.theta_gap"),
                Tensor::scalar(softplus_inverse(120.0)),
            )?;
            (Some(t1), Some(gap))
        } else {
            (None, None)
        };
        let proj = Conv1d::new(store, &format!("{prefix}.proj"), branches.count() * dim, dim, 1, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            branches,
            tokens,
            dim,
            window,
            wavelet_kernel,
            theta1,
            theta_gap,
            proj,
        })
    }

    pub fn branches(&self) -> AsmBranches {
        self.branches
    }

    pub fn projection(&self) -> &Conv1d {
        &self.proj
    }

    pub fn threshold_params(&self) -> Option<(ParamId, ParamId)> {
        self.theta1.zip(self.theta_gap)
    }

    /// Current `(theta1, theta2)` in log-power units.
    pub fn thresholds(&self, store: &ParamStore) -> Option<(f64, f64)> {
        let (t1, gap) = self.threshold_params()?;
        let t1 = store.value(t1).item();
        let gap = crate::tensor::kernels::softplus_scalar(store.value(gap).item());
        Some((t1, t1 + gap))
    }

    pub fn set_thresholds(&self, store: &mut ParamStore, theta1: f64, theta2: f64) -> Result<()> {
        let (t1, gap) = self
            .threshold_params()
            .ok_or_else(|| Error::Config("threshold branch disabled".into()))?;
        if !(theta2 > theta1) {
            return Err(Error::Config(format!(
                "theta2 ({theta2}) must exceed theta1 ({theta1})"
            )));
        }
        store.get_mut(t1).value.data_mut()[0] = theta1;
        store.get_mut(gap).value.data_mut()[0] = softplus_inverse(theta2 - theta1);
        Ok(())
    }

    /// Set thresholds from percentiles of the log power of `x` (`[B, D, Z]`).
    ///
    /// The upper edge is padded by ten gate temperatures so that the bin at
    /// the upper percentile passes the soft gate almost unattenuated.
    pub fn calibrate_thresholds(&self, store: &mut ParamStore, x: &Tensor) -> Result<()> {
        if !self.branches.has_thresholds() {
            return Ok(());
        }
        let z = self.tokens;
        let windowed: Vec<f64> = match &self.window {
            Some(w) => x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * w.data()[i % z])
                .collect(),
            None => x.data().to_vec(),
        };
        let spec = fft::rfft_rows(&windowed, z);
        let log_p: Vec<f64> = spec
            .chunks(2)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + LOG_POWER_FLOOR).ln())
            .collect();
        let [p_lo, p_hi] = self.cfg.calibration_percentiles;
        let lo = percentile(&log_p, p_lo)?;
        let mut hi = percentile(&log_p, p_hi)? + 10.0 * self.cfg.gate_temperature;
        if hi <= lo {
            hi = lo + 1e-3;
        }
        self.set_thresholds(store, lo, hi)
    }

    /// Branch output projected back to `D` channels (no residual).
    pub fn delta<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.dim || shape[2] != self.tokens {
            return Err(Error::shape(format!(
                "spectral module expects [B, {}, {}], got {shape:?}",
                self.dim, self.tokens
            )));
        }
        let b = shape[0];
        let mut parts = Vec::with_capacity(2);
        if self.branches.fourier {
            let xw = match &self.window {
                Some(w) => x.mul(tape.constant(w.clone()))?,
                None => x,
            };
            let mut spec = xw.rfft()?;
            if let Some((t1, gap)) = self.threshold_params() {
                let theta1 = tape.param(store, t1);
                let theta2 = theta1.add(tape.param(store, gap).softplus())?;
                let hard = self.cfg.mode.is_hard(training);
                let straight = self.cfg.mode == GateMode::HardAlways;
                spec = gate_on_tape(
                    tape,
                    spec,
                    theta1,
                    theta2,
                    hard,
                    straight,
                    self.cfg.gate_temperature,
                )?;
            }
            parts.push(spec.irfft(self.tokens)?);
        }
        if let Some(k) = &self.wavelet_kernel {
            let flat = x.reshape(&[b * self.dim, 1, self.tokens])?;
            let rec = flat.conv1d(tape.constant(k.clone()), None, Padding::Same)?;
            parts.push(rec.reshape(&[b, self.dim, self.tokens])?);
        }
        let fused = if parts.len() == 1 {
            parts[0]
        } else {
            Var::concat(&parts, 1)?
        };
        self.proj.forward(tape, store, fused)
    }

    /// `x + delta(x)`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        x.add(self.delta(tape, store, x, training)?)
    }

    /// Projection that averages the active branches channel-wise.
    pub fn set_branch_average(&self, store: &mut ParamStore) {
        let nb = self.branches.count();
        let d = self.dim;
        let w = store.get_mut(self.proj.weight).value.data_mut();
        w.fill(0.0);
        for c in 0..d {
            for br in 0..nb {
                w[c * nb * d + br * d + c] = 1.0 / nb as f64;
            }
        }
        store.get_mut(self.proj.bias).value.data_mut().fill(0.0);
    }

    pub fn num_scalars(&self) -> usize {
        self.proj.num_scalars() + if self.branches.has_thresholds() { 2 } else { 0 }
    }
}
