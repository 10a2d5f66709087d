//! Non-overlapping patching and the patch embedding with a learnable
//! positional table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    ReplicateLast,
    Zero,
}

fn default_patch_len() -> usize {
    8
}
fn default_embed_dim() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    #[serde(default = "default_patch_len")]
    pub patch_len: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: default_patch_len(),
            embed_dim: default_embed_dim(),
            pad_policy: PadPolicy::default(),
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "patch_len and embed_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patch count `ceil(T / b)`.
    pub fn num_patches(&self, len: usize) -> usize {
        len.div_ceil(self.patch_len)
    }
}

/// Split every row of `x` (`[.., T]`) into `Z = ceil(T / b)` patches, giving
/// `[R, Z, b]` where `R` is the product of the leading extents.
pub fn patchify(x: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let t = *x.shape().last().ok_or_else(|| Error::Input("empty series".into()))?;
    let rows = x.len() / t;
    let b = cfg.patch_len;
    let z = cfg.num_patches(t);
    let mut out = Vec::with_capacity(rows * z * b);
    for row in x.data().chunks(t) {
        out.extend_from_slice(row);
        let fill = match cfg.pad_policy {
            PadPolicy::ReplicateLast => row[t - 1],
            PadPolicy::Zero => 0.0,
        };
        out.resize(out.len() + z * b - t, fill);
    }
    Tensor::new(vec![rows, z, b], out)
}

/// Per-patch projection `b -> b'` followed by the additive positional row.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub proj: Linear,
    pub positions: ParamId,
    max_patches: usize,
    dim: usize,
}

impl PatchEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &PatchConfig,
        max_patches: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if max_patches == 0 {
            return Err(Error::Config("positional table needs at least one row".into()));
        }
        let proj = Linear::new(store, &format!("{prefix}.proj"), cfg.patch_len, cfg.embed_dim, rng)?;
        let positions = store.add(
            format!("{prefix}.pos"),
            Tensor::randn(&[max_patches, cfg.embed_dim], 0.02, rng),
        )?;
        Ok(Self {
            proj,
            positions,
            max_patches,
            dim: cfg.embed_dim,
        })
    }

    pub fn max_patches(&self) -> usize {
        self.max_patches
    }

    /// `[R, Z, b] -> [R, Z, b']`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, patches: Var<'t>) -> Result<Var<'t>> {
        self.forward_masked(tape, store, patches, None, None)
    }

    /// Like [`forward`](Self::forward), but the projected content of patches
    /// whose `keep` entry (`[R, Z, 1]`) is 0 is replaced by `token` (or zero).
    /// Positional rows are added to every patch.
    pub fn forward_masked<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        patches: Var<'t>,
        keep: Option<&Tensor>,
        token: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let shape = patches.shape();
        if shape.len() != 3 || shape[2] != self.proj.d_in {
            return Err(Error::shape(format!(
                "embedding expects [R, Z, {}], got {shape:?}",
                self.proj.d_in
            )));
        }
        let z = shape[1];
        if z > self.max_patches {
            return Err(Error::Capacity(format!(
                "{z} patches exceed the positional table size Z_max = {}",
                self.max_patches
            )));
        }
        let pos = tape.param(store, self.positions).slice(0, 0, z)?;
        let mut content = self.proj.forward(tape, store, patches)?;
        if let Some(keep) = keep {
            if keep.shape() != [shape[0], z, 1] {
                return Err(Error::shape(format!(
                    "patch mask must be [{}, {z}, 1], got {:?}",
                    shape[0],
                    keep.shape()
                )));
            }
            content = content.mul(tape.constant(keep.clone()))?;
            if let Some(token) = token {
                let dropped = keep.map(|k| 1.0 - k);
                content = content.add(tape.constant(dropped).mul(token)?)?;
            }
        }
        content.add(pos)
    }

    pub fn num_scalars(&self) -> usize {
        self.proj.num_scalars() + self.max_patches * self.dim
    }
}
