//! Real-input FFT along the last axis, backed by `rustfft` plans.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Number of non-negative frequency bins for a length-`h` real signal.
pub fn rfft_len(h: usize) -> usize {
    h / 2 + 1
}

/// Full complex DFT `F[k] = sum_h x[h] e^{-j 2 pi k h / H}`.
pub fn fft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if !buf.is_empty() {
        plan(buf.len(), false).process(&mut buf);
    }
    buf
}

/// Non-negative-frequency half of the DFT of a real signal.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let mut full = fft(x);
    full.truncate(rfft_len(x.len()));
    full
}

/// Inverse of [`rfft`]: rebuilds the Hermitian spectrum and returns the real signal.
/// Imaginary parts of the DC and Nyquist bins are ignored.
pub fn irfft(spec: &[Complex64], h: usize) -> Vec<f64> {
    let k = rfft_len(h);
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    let m = k.min(spec.len());
    buf[..m].copy_from_slice(&spec[..m]);
    buf[0].im = 0.0;
    if h.is_multiple_of(2) {
        buf[h / 2].im = 0.0;
    }
    for i in 1..k {
        if h - i >= k {
            buf[h - i] = spec[i].conj();
        }
    }
    plan(h, true).process(&mut buf);
    buf.iter().map(|c| c.re / h as f64).collect()
}

/// `rfft` over the last axis of a tensor.
pub fn rfft_tensor(x: &Tensor) -> ComplexTensor {
    let h = *x.shape().last().unwrap();
    let k = rfft_len(h);
    let mut re = Vec::with_capacity(x.len() / h * k);
    let mut im = Vec::with_capacity(x.len() / h * k);
    for row in x.data().chunks(h) {
        for c in rfft(row) {
            re.push(c.re);
            im.push(c.im);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    ComplexTensor {
        re: Tensor::new(shape.clone(), re).unwrap(),
        im: Tensor::new(shape, im).unwrap(),
    }
}

/// `irfft` over the last axis; `spec` must hold `h/2 + 1` bins per row.
pub fn irfft_tensor(spec: &ComplexTensor, h: usize) -> Result<Tensor> {
    let k = *spec.shape().last().unwrap();
    if k != rfft_len(h) {
        return Err(Error::shape(format!(
            "irfft to length {h} needs {} bins, got {k}",
            rfft_len(h)
        )));
    }
    let mut out = Vec::with_capacity(spec.re.len() / k * h);
    for (r, i) in spec.re.data().chunks(k).zip(spec.im.data().chunks(k)) {
        let bins: Vec<Complex64> = r.iter().zip(i).map(|(&a, &b)| Complex64::new(a, b)).collect();
        out.extend(irfft(&bins, h));
    }
    let mut shape = spec.shape().to_vec();
    *shape.last_mut().unwrap() = h;
    Tensor::new(shape, out)
}

// Row kernels used by the tape. Spectra are interleaved (re, im) pairs.

pub(crate) fn rfft_rows(data: &[f64], h: usize) -> Vec<f64> {
    let k = rfft_len(h);
    let p = plan(h, false);
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    let mut out = Vec::with_capacity(data.len() / h * k * 2);
    for row in data.chunks(h) {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex64::new(v, 0.0);
        }
        p.process(&mut buf);
        for c in &buf[..k] {
            out.push(c.re);
            out.push(c.im);
        }
    }
    out
}

pub(crate) fn irfft_rows(data: &[f64], h: usize) -> Vec<f64> {
    let k = rfft_len(h);
    let mut out = Vec::with_capacity(data.len() / (2 * k) * h);
    let mut bins = vec![Complex64::new(0.0, 0.0); k];
    for row in data.chunks(2 * k) {
        for (b, pair) in bins.iter_mut().zip(row.chunks(2)) {
            *b = Complex64::new(pair[0], pair[1]);
        }
        out.extend(irfft(&bins, h));
    }
    out
}

/// Adjoint of `rfft_rows`: `gx[h] = Re(sum_{k<K} G[k] e^{+j 2 pi k h / H})`.
pub(crate) fn rfft_adjoint_rows(grad: &[f64], h: usize) -> Vec<f64> {
    let k = rfft_len(h);
    let p = plan(h, true);
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    let mut out = Vec::with_capacity(grad.len() / (2 * k) * h);
    for row in grad.chunks(2 * k) {
        buf.fill(Complex64::new(0.0, 0.0));
        for (b, pair) in buf.iter_mut().zip(row.chunks(2)) {
            *b = Complex64::new(pair[0], pair[1]);
        }
        p.process(&mut buf);
        out.extend(buf.iter().map(|c| c.re));
    }
    out
}

/// Adjoint of `irfft_rows`: `(c_k / H) * rfft(g)[k]`, with `c_k = 2` except at DC and Nyquist.
pub(crate) fn irfft_adjoint_rows(grad: &[f64], h: usize) -> Vec<f64> {
    let k = rfft_len(h);
    let mut out = rfft_rows(grad, h);
    for row in out.chunks_mut(2 * k) {
        for (i, pair) in row.chunks_mut(2).enumerate() {
            let edge = i == 0 || (h.is_multiple_of(2) && i == h / 2);
            let c = if edge { 1.0 } else { 2.0 } / h as f64;
            pair[0] *= c;
            pair[1] *= c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_has_flat_spectrum() {
        for c in rfft(&[1.0, 0.0, 0.0, 0.0]) {
            assert!((c.re - 1.0).abs() < 1e-15 && c.im.abs() < 1e-15);
        }
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let x: Vec<f64> = (0..8)
            .map(|h| (2.0 * std::f64::consts::PI * 2.0 * h as f64 / 8.0).cos())
            .collect();
        let f = rfft(&x);
        assert!((f[2].norm() - 4.0).abs() < 1e-12);
        for (k, c) in f.iter().enumerate() {
            if k != 2 {
                assert!(c.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn odd_and_even_round_trip() {
        for h in [1usize, 2, 3, 7, 12, 16] {
            let x: Vec<f64> = (0..h).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect();
            let y = irfft(&rfft(&x), h);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12, "h={h}");
            }
        }
    }

    #[test]
    fn irfft_rejects_wrong_bin_count() {
        let spec = ComplexTensor::zeros(&[2, 4]);
        assert!(irfft_tensor(&spec, 8).is_err());
        assert!(irfft_tensor(&spec, 6).is_ok());
    }
}
