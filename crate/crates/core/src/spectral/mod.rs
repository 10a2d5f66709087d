//! Adaptive spectral processing: windowed FFT with a learnable power band,
//! a parallel Morlet wavelet branch, and the module fusing both.

mod asm;
pub mod fft;
pub mod mask;
pub mod wavelet;

pub use asm::{AdaptiveSpectralModule, AsmBranches};
pub use mask::{adaptive_mask, FrequencyRepr, GateMode};
pub use wavelet::{default_scales, MorletBank, Scalogram};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `w[h] = 0.5 * (1 - cos(2 pi h / (H - 1)))`.
pub fn hanning(len: usize) -> Result<Tensor> {
    if len < 2 {
        return Err(Error::Input(format!("Hanning window needs length >= 2, got {len}")));
    }
    let d = (len - 1) as f64;
    Ok(Tensor::from_vec(
        (0..len)
            .map(|h| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * h as f64 / d).cos()))
            .collect(),
    ))
}

fn default_true() -> bool {
    true
}
fn default_tau() -> f64 {
    0.1
}
fn default_num_scales() -> usize {
    16
}
fn default_omega0() -> f64 {
    6.0
}
fn default_calibration() -> [f64; 2] {
    [5.0, 100.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    #[serde(default = "default_true")]
    pub use_hanning: bool,
    #[serde(default = "default_tau")]
    pub gate_temperature: f64,
    #[serde(default = "default_num_scales")]
    pub num_scales: usize,
    /// Explicit scale grid; overrides `num_scales` when set.
    #[serde(default)]
    pub scales: Option<Vec<f64>>,
    #[serde(default = "default_omega0")]
    pub morlet_center: f64,
    #[serde(default)]
    pub mode: GateMode,
    /// Log-power percentiles that initialize the two thresholds.
    #[serde(default = "default_calibration")]
    pub calibration_percentiles: [f64; 2],
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            use_hanning: true,
            gate_temperature: default_tau(),
            num_scales: default_num_scales(),
            scales: None,
            morlet_center: default_omega0(),
            mode: GateMode::default(),
            calibration_percentiles: default_calibration(),
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_temperature > 0.0) {
            return Err(Error::Config("gate_temperature must be positive".into()));
        }
        if !(self.morlet_center > 0.0) {
            return Err(Error::Config("morlet_center must be positive".into()));
        }
        let [lo, hi] = self.calibration_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::Config(format!(
                "calibration percentiles [{lo}, {hi}] must satisfy 0 <= lo < hi <= 100"
            )));
        }
        if self.scales.is_none() && self.num_scales == 0 {
            return Err(Error::Config("num_scales must be at least 1".into()));
        }
        Ok(())
    }

    /// Wavelet bank for a token axis of length `tokens`.
    pub fn bank(&self, tokens: usize) -> Result<MorletBank> {
        let scales = match &self.scales {
            Some(s) => s.clone(),
            None => default_scales(tokens, self.num_scales, self.morlet_center),
        };
        MorletBank::new(scales, self.morlet_center, tokens)
    }
}
