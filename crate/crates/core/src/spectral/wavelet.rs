//! Morlet continuous wavelet transform and its admissibility-weighted inverse.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

const CALIBRATION_DRAWS: usize = 64;
const CALIBRATION_SEED: u64 = 0x5EED_0C3A;

/// CWT coefficients laid out `[.., S, Z]`, tagged with the scale grid that produced them.
#[derive(Clone, Debug)]
pub struct Scalogram {
    pub w: ComplexTensor,
    pub scales: Vec<f64>,
}

impl Scalogram {
    pub fn magnitude(&self) -> Tensor {
        self.w.abs()
    }
}

/// `count` scales, log-spaced so that the Morlet peak periods run from 2 samples
/// to `signal_len` samples.
pub fn default_scales(signal_len: usize, count: usize, omega0: f64) -> Vec<f64> {
    let lo = omega0 * 2.0 / (2.0 * PI);
    let hi = omega0 * signal_len.max(2) as f64 / (2.0 * PI);
    if count <= 1 || hi <= lo {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Sampled conjugate Morlet taps for one scale: offsets and complex weights.
#[derive(Clone, Debug)]
struct Taps {
    offset: isize,
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Morlet filter bank over a fixed signal length with calibrated inverse.
#[derive(Clone, Debug)]
pub struct MorletBank {
    scales: Vec<f64>,
    omega0: f64,
    signal_len: usize,
    taps: Vec<Taps>,
    log_widths: Vec<f64>,
    c_rec: f64,
}

impl MorletBank {
    pub fn new(scales: Vec<f64>, omega0: f64, signal_len: usize) -> Result<Self> {
        if signal_len == 0 {
            return Err(Error::Input("wavelet bank over an empty signal".into()));
        }
        if scales.is_empty() {
            return Err(Error::Config("empty scale grid".into()));
        }
        if !(omega0 > 0.0) {
            return Err(Error::Config(format!("Morlet center must be positive, got {omega0}")));
        }
        for w in scales.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Config("scales must be strictly increasing".into()));
            }
        }
        for &s in &scales {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("invalid scale {s}")));
            }
            if s > 4.0 * signal_len as f64 {
                return Err(Error::Config(format!(
                    "scale {s} exceeds 4x the signal length {signal_len}"
                )));
            }
        }
        let taps = scales
            .iter()
            .map(|&s| Self::sample(s, omega0, signal_len))
            .collect();
        let log_widths = log_widths(&scales);
        let mut bank = Self {
            scales,
            omega0,
            signal_len,
            taps,
            log_widths,
            c_rec: 1.0,
        };
        bank.c_rec = bank.calibrate();
        Ok(bank)
    }

    /// Bank with [`default_scales`].
    pub fn with_default_scales(signal_len: usize, count: usize, omega0: f64) -> Result<Self> {
        Self::new(default_scales(signal_len, count, omega0), omega0, signal_len)
    }

    fn sample(scale: f64, omega0: f64, signal_len: usize) -> Taps {
        let len = ((8.0 * scale).ceil() as usize).clamp(1, signal_len);
        let offset = -((len / 2) as isize);
        let norm = scale.powf(-0.5) * PI.powf(-0.25);
        let (mut re, mut im) = (Vec::with_capacity(len), Vec::with_capacity(len));
        for j in 0..len {
            let h = (j as isize + offset) as f64;
            let env = norm * (-h * h / (2.0 * scale * scale)).exp();
            let phase = -omega0 * h / scale;
            re.push(env * phase.cos());
            im.push(env * phase.sin());
        }
        Taps { offset, re, im }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn calibration(&self) -> f64 {
        self.c_rec
    }

    /// `W[s, t] = sum_h x[t + h] * conj-Morlet_s(h)`, zero outside the signal.
    pub fn cwt(&self, x: &Tensor) -> Result<Scalogram> {
        let z = *x.shape().last().unwrap();
        if z != self.signal_len {
            return Err(Error::shape(format!(
                "bank built for length {}, signal has {z}",
                self.signal_len
            )));
        }
        let s_n = self.scales.len();
        let rows = x.len() / z;
        let mut re = vec![0.0; rows * s_n * z];
        let mut im = vec![0.0; rows * s_n * z];
        for (r, row) in x.data().chunks(z).enumerate() {
            for (s, taps) in self.taps.iter().enumerate() {
                let base = (r * s_n + s) * z;
                for t in 0..z {
                    let (mut ar, mut ai) = (0.0, 0.0);
                    for (j, (wr, wi)) in taps.re.iter().zip(&taps.im).enumerate() {
                        let pos = t as isize + j as isize + taps.offset;
                        if pos >= 0 && (pos as usize) < z {
                            let v = row[pos as usize];
                            ar += v * wr;
                            ai += v * wi;
                        }
                    }
                    re[base + t] = ar;
                    im[base + t] = ai;
                }
            }
        }
        let mut shape = x.shape()[..x.rank() - 1].to_vec();
        shape.extend([s_n, z]);
        Ok(Scalogram {
            w: ComplexTensor::new(Tensor::new(shape.clone(), re)?, Tensor::new(shape, im)?)?,
            scales: self.scales.clone(),
        })
    }

    fn icwt_with(&self, w: &Scalogram, c: f64) -> Result<Tensor> {
        if w.scales != self.scales {
            return Err(Error::Contract(
                "scalogram was produced with a different scale grid".into(),
            ));
        }
        let shape = w.w.shape();
        let (s_n, z) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let rows = w.w.re.len() / (s_n * z);
        let weights: Vec<f64> = self
            .scales
            .iter()
            .zip(&self.log_widths)
            .map(|(s, dl)| c * dl / s.sqrt())
            .collect();
        let mut out = vec![0.0; rows * z];
        for r in 0..rows {
            for (s, wt) in weights.iter().enumerate() {
                let src = &w.w.re.data()[(r * s_n + s) * z..][..z];
                for (o, v) in out[r * z..][..z].iter_mut().zip(src) {
                    *o += wt * v;
                }
            }
        }
        let mut oshape = shape[..shape.len() - 2].to_vec();
        oshape.push(z);
        Tensor::new(oshape, out)
    }

    /// `x[t] = c_rec * sum_s Re W[s, t] / sqrt(scale_s) * dlog(scale)_s`.
    pub fn icwt(&self, w: &Scalogram) -> Result<Tensor> {
        self.icwt_with(w, self.c_rec)
    }

    /// Least-squares `c_rec` of icwt(cwt(x)) against x on seeded white noise.
    fn calibrate(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..CALIBRATION_DRAWS {
            let x = Tensor::randn(&[self.signal_len], 1.0, &mut rng);
            let w = self.cwt(&x).expect("length matches");
            let y = self.icwt_with(&w, 1.0).expect("grid matches");
            num += x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>();
            den += y.data().iter().map(|b| b * b).sum::<f64>();
        }
        if den > 0.0 {
            num / den
        } else {
            1.0
        }
    }

    /// Real kernel `k` such that icwt(cwt(x)) equals the same-padded
    /// cross-correlation of `x` with `k` (odd length, centered).
    pub fn round_trip_kernel(&self) -> Vec<f64> {
        let half = self
            .taps
            .iter()
            .map(|t| (-t.offset).max(t.offset + t.re.len() as isize - 1))
            .max()
            .unwrap_or(0) as usize;
        let mut k = vec![0.0; 2 * half + 1];
        for ((taps, s), dl) in self.taps.iter().zip(&self.scales).zip(&self.log_widths) {
            let wt = self.c_rec * dl / s.sqrt();
            for (j, wr) in taps.re.iter().enumerate() {
                let h = j as isize + taps.offset;
                k[(h + half as isize) as usize] += wt * wr;
            }
        }
        k
    }
}

/// Trapezoid widths of the scale grid in log space.
fn log_widths(scales: &[f64]) -> Vec<f64> {
    let n = scales.len();
    if n == 1 {
        return vec![1.0];
    }
    let l: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    (0..n)
        .map(|i| {
            let lo = if i == 0 { l[0] } else { l[i - 1] };
            let hi = if i == n - 1 { l[n - 1] } else { l[i + 1] };
            let span = hi - lo;
            if i == 0 || i == n - 1 {
                span
            } else {
                span / 2.0
            }
        })
        .collect()
}
