//! Parameterized building blocks shared by the modules.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Padding, ParamId, ParamStore, Tape, Tensor, Var};

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Same-padded, channel-first 1-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * kernel;
        let weight = store.add(
            format!("{prefix}.kernel"),
            fan_in_uniform(&[c_out, c_in, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), fan_in_uniform(&[c_out], fan_in, rng))?;
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.conv1d(w, Some(b), Padding::Same)
    }

    pub fn num_scalars(&self) -> usize {
        self.c_out * self.c_in * self.kernel + self.c_out
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.data_mut().fill(0.0);
        store.get_mut(self.bias).value.data_mut().fill(0.0);
    }
}

/// Affine map over the last axis: `x[.., in] @ W[in, out] + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            fan_in_uniform(&[d_in, d_out], d_in, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), fan_in_uniform(&[d_out], d_in, rng))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.matmul(w)?.add(b)
    }

    pub fn num_scalars(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// Layer normalization along one axis with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: usize,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, axis: usize) -> Result<Self> {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim]))?;
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            gamma,
            beta,
            axis,
            dim,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        x.layer_norm(g, b, self.axis)
    }

    pub fn num_scalars(&self) -> usize {
        2 * self.dim
    }
}
