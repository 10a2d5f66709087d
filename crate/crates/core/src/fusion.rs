//! Information fusion module: two exponentially gated streams exchanging
//! affine information through mixed-kernel convolutions and GELU cross-gating.
//!
//! With `H` of shape `[B, D, Z]` (embedding channels `D`, tokens `Z`):
//!
//! ```text
//! H1o = H  * exp(beta(H))       H1c = H  * exp(alpha(H))
//! H2o = H1o + nu(H1c)           H2c = H1c - mu(H1o)
//! H3o = rho(H2o) * GELU(omega(H2c))
//! H3c = omega(H2c) * GELU(rho(H2o))
//! out = conv_out(H3o + H3c) [+ H]
//! ```
//!
//! Convolutions run along `Z` and mix the `D` channels. Gate exponents are
//! clamped to `[-exp_clip, exp_clip]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv1d;
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

fn default_k_mid() -> usize {
    3
}
fn default_k_small() -> usize {
    3
}
fn default_k_large() -> usize {
    7
}
fn default_k_out() -> usize {
    3
}
fn default_clip() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IfmConfig {
    /// Kernel width of alpha, beta, mu, nu.
    #[serde(default = "default_k_mid")]
    pub k_mid: usize,
    /// Kernel width of rho.
    #[serde(default = "default_k_small")]
    pub k_small: usize,
    /// Kernel width of omega.
    #[serde(default = "default_k_large")]
    pub k_large: usize,
    #[serde(default = "default_k_out")]
    pub k_out: usize,
    #[serde(default = "default_clip")]
    pub exp_clip: f64,
    #[serde(default = "default_true")]
    pub residual: bool,
}

impl Default for IfmConfig {
    fn default() -> Self {
        Self {
            k_mid: default_k_mid(),
            k_small: default_k_small(),
            k_large: default_k_large(),
            k_out: default_k_out(),
            exp_clip: default_clip(),
            residual: true,
        }
    }
}

impl IfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_mid == 0 || self.k_small == 0 || self.k_out == 0 {
            return Err(Error::Config("IFM kernel widths must be positive".into()));
        }
        if self.k_small >= self.k_large {
            return Err(Error::Config(format!(
                "IFM small kernel ({}) must be narrower than large kernel ({})",
                self.k_small, self.k_large
            )));
        }
        if !(self.exp_clip > 0.0) {
            return Err(Error::Config("exp_clip must be positive".into()));
        }
        Ok(())
    }

    /// Tokens on either side of `t` that can influence output token `t`.
    pub fn receptive_radius(&self) -> usize {
        (self.k_mid / 2) * 2 + self.k_small.max(self.k_large) / 2 + self.k_out / 2
    }

    pub fn num_scalars(&self, dim: usize) -> usize {
        let conv = |k: usize| dim * dim * k + dim;
        4 * conv(self.k_mid) + conv(self.k_small) + conv(self.k_large) + conv(self.k_out)
    }
}

#[derive(Clone, Debug)]
pub struct InformationFusionModule {
    pub alpha: Conv1d,
    pub beta: Conv1d,
    pub mu: Conv1d,
    pub nu: Conv1d,
    pub rho: Conv1d,
    pub omega: Conv1d,
    pub out: Conv1d,
    cfg: IfmConfig,
    dim: usize,
}

fn check_stage(v: Var<'_>, stage: &str) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("ifm.{stage}")))
    }
}

impl InformationFusionModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &IfmConfig,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut conv = |name: &str, k: usize| Conv1d::new(store, &format!("{prefix}.{name}"), dim, dim, k, rng);
        Ok(Self {
            alpha: conv("alpha", cfg.k_mid)?,
            beta: conv("beta", cfg.k_mid)?,
            mu: conv("mu", cfg.k_mid)?,
            nu: conv("nu", cfg.k_mid)?,
            rho: conv("rho", cfg.k_small)?,
            omega: conv("omega", cfg.k_large)?,
            out: conv("out", cfg.k_out)?,
            cfg: cfg.clone(),
            dim,
        })
    }

    pub fn config(&self) -> &IfmConfig {
        &self.cfg
    }

    pub fn convs(&self) -> [&Conv1d; 7] {
        [
            &self.alpha,
            &self.beta,
            &self.mu,
            &self.nu,
            &self.rho,
            &self.omega,
            &self.out,
        ]
    }

    /// The fused interaction, without the residual path.
    pub fn delta<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<Var<'t>> {
        let shape = h.shape();
        if shape.len() != 3 || shape[1] != self.dim {
            return Err(Error::shape(format!(
                "IFM expects [B, {}, Z], got {shape:?}",
                self.dim
            )));
        }
        check_stage(h, "input")?;
        let c = self.cfg.exp_clip;
        let gate = |conv: &Conv1d, x: Var<'t>| -> Result<Var<'t>> {
            Ok(conv.forward(tape, store, x)?.clamp(-c, c).exp())
        };
        let h1_orig = h.mul(gate(&self.beta, h)?)?;
        let h1_copy = h.mul(gate(&self.alpha, h)?)?;
        check_stage(h1_orig, "h1_orig")?;
        check_stage(h1_copy, "h1_copy")?;

        let h2_orig = h1_orig.add(self.nu.forward(tape, store, h1_copy)?)?;
        let h2_copy = h1_copy.sub(self.mu.forward(tape, store, h1_orig)?)?;
        check_stage(h2_orig, "h2_orig")?;
        check_stage(h2_copy, "h2_copy")?;

        let r = self.rho.forward(tape, store, h2_orig)?;
        let w = self.omega.forward(tape, store, h2_copy)?;
        let h3_orig = r.mul(w.gelu())?;
        let h3_copy = w.mul(r.gelu())?;
        check_stage(h3_orig, "h3_orig")?;
        check_stage(h3_copy, "h3_copy")?;

        let out = self.out.forward(tape, store, h3_orig.add(h3_copy)?)?;
        check_stage(out, "output")?;
        Ok(out)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<Var<'t>> {
        let d = self.delta(tape, store, h)?;
        if self.cfg.residual {
            h.add(d)
        } else {
            Ok(d)
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.convs().iter().map(|c| c.num_scalars()).sum()
    }

    /// Zero every kernel and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        for c in self.convs() {
            c.zero(store);
        }
    }
}

/// Max relative error between analytic and central-difference gradients of
/// `sum(weights * ifm(H))`, over all IFM parameters and the input `H`.
pub fn ifm_backward_check(
    store: &ParamStore,
    ifm: &InformationFusionModule,
    h: &Tensor,
    weights: &Tensor,
) -> Result<f64> {
    let mut local = store.clone();
    let input = local.add("__ifm_check.input", h.clone())?;
    let report = check_gradients(&mut local, 1e-4, |tape, s| {
        let x = tape.param(s, input);
        let y = ifm.forward(tape, s, x)?;
        Ok(y.mul(tape.constant(weights.clone()))?.sum())
    })?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(dim: usize, seed: u64) -> (ParamStore, InformationFusionModule) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ifm = InformationFusionModule::new(&mut store, "ifm", &IfmConfig::default(), dim, &mut rng)
            .unwrap();
        (store, ifm)
    }

    fn run(store: &ParamStore, ifm: &InformationFusionModule, h: &Tensor) -> Tensor {
        let tape = Tape::new();
        let x = tape.constant(h.clone());
        (*ifm.forward(&tape, store, x).unwrap().value()).clone()
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let (mut store, ifm) = build(3, 1);
        for c in ifm.convs() {
            store.get_mut(c.bias).value.data_mut().fill(0.0);
        }
        let y = run(&store, &ifm, &Tensor::zeros(&[2, 3, 6]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_preserved() {
        let (store, ifm) = build(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::randn(&[3, 4, 9], 1.0, &mut rng);
        assert_eq!(run(&store, &ifm, &h).shape(), &[3, 4, 9]);
    }

    #[test]
    fn streams_are_not_interchangeable() {
        let (mut store, ifm) = build(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let y = run(&store, &ifm, &h);
        // swap alpha<->beta and mu<->nu
        for (a, b) in [(&ifm.alpha, &ifm.beta), (&ifm.mu, &ifm.nu)] {
            for (pa, pb) in [(a.weight, b.weight), (a.bias, b.bias)] {
                let va = store.value(pa).clone();
                let vb = store.value(pb).clone();
                store.get_mut(pa).value = vb;
                store.get_mut(pb).value = va;
            }
        }
        let swapped = run(&store, &ifm, &h);
        assert!(y.max_abs_diff(&swapped) > 1e-6);
    }

    #[test]
    fn locality_matches_receptive_radius() {
        let (store, ifm) = build(2, 5);
        let z = 24;
        let radius = IfmConfig::default().receptive_radius();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::randn(&[1, 2, z], 0.5, &mut rng);
        let base = run(&store, &ifm, &h);
        let t0 = 11;
        let mut bumped = h.clone();
        bumped.data_mut()[t0] += 0.7;
        let y = run(&store, &ifm, &bumped);
        for c in 0..2 {
            for t in 0..z {
                let changed = (y.data()[c * z + t] - base.data()[c * z + t]).abs() > 0.0;
                if t.abs_diff(t0) > radius {
                    assert!(!changed, "token {t} changed outside radius {radius}");
                }
            }
        }
        let edge = [t0 - radius, t0 + radius];
        assert!(edge
            .iter()
            .any(|&t| (0..2).any(|c| y.data()[c * z + t] != base.data()[c * z + t])));
    }

    #[test]
    fn first_stage_bounded_by_clip() {
        let (store, ifm) = build(2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = Tensor::randn(&[1, 2, 10], 100.0, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(h.clone());
        let g = ifm.beta.forward(&tape, &store, x).unwrap().clamp(-10.0, 10.0).exp();
        let h1 = x.mul(g).unwrap().value();
        let bound = 10f64.exp() * h.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(h1.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (store, ifm) = build(2, 12);
        let h = Tensor::uniform(&[1, 2, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[1, 2, 5], -1.0, 1.0, &mut rng);
        let err = ifm_backward_check(&store, &ifm, &h, &w).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn clamped_gradients_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (store, ifm) = build(2, 14);
        let h = Tensor::uniform(&[1, 2, 5], -100.0, 100.0, &mut rng);
        let tape = Tape::new();
        let mut s = store.clone();
        let id = s.add("input", h).unwrap();
        let x = tape.param(&s, id);
        let loss = ifm.forward(&tape, &s, x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.iter().all(|(_, t)| t.is_finite()));
    }
}
