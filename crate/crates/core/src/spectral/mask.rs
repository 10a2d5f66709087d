//! Learnable two-sided power-band gate over FFT bins.

use serde::{Deserialize, Serialize};

use super::fft;
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid_scalar;
use crate::tensor::{ComplexTensor, Tensor, Tape, Var};

/// Floor added to the power before taking its log.
pub const LOG_POWER_FLOOR: f64 = 1e-12;

/// How the band bracket is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Sigmoid gate while training, exact bracket at inference.
    #[default]
    SoftTrainHardEval,
    /// Exact bracket forward; sigmoid-gate gradient backward.
    HardAlways,
    SoftAlways,
}

impl GateMode {
    pub fn is_hard(self, training: bool) -> bool {
        match self {
            GateMode::SoftTrainHardEval => !training,
            GateMode::HardAlways => true,
            GateMode::SoftAlways => false,
        }
    }
}

/// Spectrum of a (optionally windowed) signal with its power.
#[derive(Clone, Debug)]
pub struct FrequencyRepr {
    pub f: ComplexTensor,
    pub p: Tensor,
}

impl FrequencyRepr {
    /// FFT along the last axis, after a Hanning window when `use_hanning`.
    pub fn from_signal(x: &Tensor, use_hanning: bool) -> Result<Self> {
        let h = *x.shape().last().unwrap();
        let f = if use_hanning {
            let w = super::hanning(h)?;
            let windowed: Vec<f64> = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * w.data()[i % h])
                .collect();
            fft::rfft_tensor(&Tensor::new(x.shape().to_vec(), windowed)?)
        } else {
            fft::rfft_tensor(x)
        };
        let p = f.power();
        Ok(Self { f, p })
    }

    pub fn log_power(&self) -> Tensor {
        self.p.map(|p| (p + LOG_POWER_FLOOR).ln())
    }
}

/// `[theta1 <= log P <= theta2]` per bin.
pub fn hard_gate(log_power: f64, theta1: f64, theta2: f64) -> f64 {
    if theta1 <= log_power && log_power <= theta2 {
        1.0
    } else {
        0.0
    }
}

/// `sigmoid((log P - theta1)/tau) * sigmoid((theta2 - log P)/tau)`.
pub fn soft_gate(log_power: f64, theta1: f64, theta2: f64, tau: f64) -> f64 {
    sigmoid_scalar((log_power - theta1) / tau) * sigmoid_scalar((theta2 - log_power) / tau)
}

/// Gate each bin of `repr.f` by its log-power band membership.
pub fn adaptive_mask(
    repr: &FrequencyRepr,
    theta1: f64,
    theta2: f64,
    hard: bool,
    tau: f64,
) -> Result<ComplexTensor> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("gate temperature must be positive, got {tau}")));
    }
    let gate = repr.log_power().map(|lp| {
        if hard {
            hard_gate(lp, theta1, theta2)
        } else {
            soft_gate(lp, theta1, theta2, tau)
        }
    });
    let apply = |t: &Tensor| {
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(gate.data()).map(|(a, g)| a * g).collect(),
        )
    };
    ComplexTensor::new(apply(&repr.f.re)?, apply(&repr.f.im)?)
}

/// Tape version of the gate. `spectrum` is `[.., K, 2]` as produced by [`Var::rfft`];
/// `theta1`, `theta2` are one-element vars.
pub fn gate_on_tape<'t>(
    tape: &'t Tape,
    spectrum: Var<'t>,
    theta1: Var<'t>,
    theta2: Var<'t>,
    hard: bool,
    straight_through: bool,
    tau: f64,
) -> Result<Var<'t>> {
    let axis = spectrum.shape().len() - 1;
    let log_p = spectrum.square().sum_axis(axis)?.add_scalar(LOG_POWER_FLOOR).ln();
    let soft = || -> Result<Var<'t>> {
        let lo = log_p.sub(theta1)?.scale(1.0 / tau).sigmoid();
        let hi = theta2.sub(log_p)?.scale(1.0 / tau).sigmoid();
        lo.mul(hi)
    };
    let gate = if hard {
        let (t1, t2) = (theta1.value().item(), theta2.value().item());
        let hard_vals = log_p.value().map(|lp| hard_gate(lp, t1, t2));
        if straight_through {
            let s = soft()?;
            let correction = tape.constant(hard_vals).sub(s.detach())?;
            s.add(correction)?
        } else {
            tape.constant(hard_vals)
        }
    } else {
        soft()?
    };
    spectrum.mul(gate)
}
