//! Forward kernels shared by the tape and by plain (non-recorded) callers.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-fill so the output keeps the input length.
    Same,
    /// No padding; output length `T - k + 1`.
    Valid,
}

impl Padding {
    fn left(self, k: usize) -> usize {
        match self {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        }
    }

    fn out_len(self, t: usize, k: usize) -> Option<usize> {
        match self {
            Padding::Same => Some(t),
            Padding::Valid => t.checked_sub(k).map(|v| v + 1),
        }
    }
}

/// Split a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub left: usize,
    pub batched: bool,
}

pub(crate) fn conv_dims(
    input: &[usize],
    kernel: &[usize],
    bias: Option<&[usize]>,
    padding: Padding,
) -> Result<ConvDims> {
    let (batch, c_in, t_in, batched) = match *input {
        [c, t] => (1, c, t, false),
        [b, c, t] => (b, c, t, true),
        _ => {
            return Err(Error::shape(format!(
                "conv1d input must be [C, T] or [B, C, T], got {input:?}"
            )))
        }
    };
    let [c_out, kc_in, k] = *kernel else {
        return Err(Error::shape(format!(
            "conv1d kernel must be [C_out, C_in, k], got {kernel:?}"
        )));
    };
    if kc_in != c_in {
        return Err(Error::shape(format!(
            "conv1d channel mismatch: input has {c_in} channels, kernel expects {kc_in}"
        )));
    }
    if let Some(b) = bias {
        if b != [c_out] {
            return Err(Error::shape(format!(
                "conv1d bias must be [{c_out}], got {b:?}"
            )));
        }
    }
    let t_out = padding.out_len(t_in, k).ok_or_else(|| {
        Error::shape(format!("valid conv1d kernel width {k} exceeds length {t_in}"))
    })?;
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        k,
        t_in,
        t_out,
        left: padding.left(k),
        batched,
    })
}

/// 1-D cross-correlation over the last axis:
/// `out[c, t] = bias[c] + sum_{i,j} kernel[c, i, j] * input[i, t + j - left]`,
/// with out-of-range inputs read as zero.
pub fn conv1d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    padding: Padding,
) -> Result<Tensor> {
    let d = conv_dims(input.shape(), kernel.shape(), bias.map(|b| b.shape()), padding)?;
    let x = input.data();
    let w = kernel.data();
    let mut out = vec![0.0; d.batch * d.c_out * d.t_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let o = &mut out[(b * d.c_out + co) * d.t_out..][..d.t_out];
            if let Some(bias) = bias {
                o.fill(bias.data()[co]);
            }
            for ci in 0..d.c_in {
                let xs = &x[(b * d.c_in + ci) * d.t_in..][..d.t_in];
                let ws = &w[(co * d.c_in + ci) * d.k..][..d.k];
                for (j, &wv) in ws.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    // t + j - left in [0, t_in)
                    let lo = d.left.saturating_sub(j);
                    let hi = (d.t_in + d.left).saturating_sub(j).min(d.t_out);
                    for t in lo..hi {
                        o[t] += wv * xs[t + j - d.left];
                    }
                }
            }
        }
    }
    let shape = if d.batched {
        vec![d.batch, d.c_out, d.t_out]
    } else {
        vec![d.c_out, d.t_out]
    };
    Tensor::new(shape, out)
}

/// Gradients of [`conv1d`] with respect to input, kernel and bias.
pub(crate) fn conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &[f64],
    padding: Padding,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = conv_dims(input.shape(), kernel.shape(), None, padding)
        .expect("shapes validated in forward");
    let x = input.data();
    let w = kernel.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d.c_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g = &grad[(b * d.c_out + co) * d.t_out..][..d.t_out];
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..d.c_in {
                let base = (b * d.c_in + ci) * d.t_in;
                let wbase = (co * d.c_in + ci) * d.k;
                for j in 0..d.k {
                    let lo = d.left.saturating_sub(j);
                    let hi = (d.t_in + d.left).saturating_sub(j).min(d.t_out);
                    let wv = w[wbase + j];
                    let mut acc = 0.0;
                    for (t, &gt) in g.iter().enumerate().take(hi).skip(lo) {
                        let xi = base + t + j - d.left;
                        acc += gt * x[xi];
                        gx[xi] += gt * wv;
                    }
                    gw[wbase + j] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Exact (erf-form) GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) struct LayerNormOut {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_full(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    axis: usize,
) -> Result<LayerNormOut> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "layer_norm axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::shape(format!(
            "layer_norm affine parameters must be [{n}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let xd = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let mean = (0..n).map(|a| xd[at(a)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|a| (xd[at(a)] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[o * inner + i] = inv;
            for a in 0..n {
                let h = (xd[at(a)] - mean) * inv;
                xhat[at(a)] = h;
                y[at(a)] = g[a] * h + b[a];
            }
        }
    }
    Ok(LayerNormOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat,
        inv_std,
    })
}

/// Normalize to zero mean / unit variance along `axis`, then apply `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, axis: usize) -> Result<Tensor> {
    Ok(layer_norm_full(x, gamma, beta, axis)?.y)
}

/// `a[..., m, k] @ b[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch {
        for i in 0..m {
            let row = &ad[(bi * m + i) * k..][..k];
            let o = &mut out[(bi * m + i) * n..][..n];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..][..n];
                for (ov, &bv) in o.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || b.len() != 2 {
        return Err(Error::shape(format!(
            "matmul expects [..., m, k] x [k, n], got {a:?} x {b:?}"
        )));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    if b[0] != k {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {a:?} x {b:?}"
        )));
    }
    let batch = a[..a.len() - 2].iter().product();
    Ok((batch, m, k, b[1]))
}

/// Log-softmax over the last axis with log-sum-exp stabilization.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
