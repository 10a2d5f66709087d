//! Self-describing parameter container.
//!
//! Layout: `FUSADCKP` magic, `u32` format version, `u32` manifest length, the
//! JSON manifest (config, metadata, and per-parameter name/shape/dtype), the
//! parameter payloads as little-endian `f64`, and a trailing SHA-256 of all
//! preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"FUSADCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: serde_json::Value,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value, meta: serde_json::Value) -> Self {
        Self {
            config,
            meta,
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config.clone(),
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest is serializable");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 8;
        if bytes.len() < header + DIGEST_LEN {
            return Err(Error::Load("file too short for a checkpoint".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Load("bad magic bytes".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(8);
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Load("checksum mismatch (truncated or corrupt file)".into()));
        }
        let json_len = word(12) as usize;
        let json = body
            .get(header..header + json_len)
            .ok_or_else(|| Error::Load("manifest extends past end of file".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Load(format!("manifest: {e}")))?;
        let mut at = header + json_len;
        let mut params = Vec::with_capacity(manifest.params.len());
        for entry in manifest.params {
            if entry.dtype != "f64" {
                return Err(Error::Load(format!(
                    "parameter `{}` has unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let n: usize = entry.shape.iter().product();
            let raw = body
                .get(at..at + 8 * n)
                .ok_or_else(|| Error::Load(format!("payload of `{}` is truncated", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 8 * n;
            let t = Tensor::new(entry.shape, data).map_err(|e| Error::Load(e.to_string()))?;
            params.push((entry.name, t));
        }
        if at != body.len() {
            return Err(Error::Load("trailing bytes after payload".into()));
        }
        Ok(Self {
            config: manifest.config,
            meta: manifest.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Copy every stored parameter whose name satisfies `select` into `store`.
    ///
    /// Selected names must exist in `store` with the same shape. Returns the
    /// number of parameters copied.
    pub fn load_into(&self, store: &mut ParamStore, select: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.params.iter().filter(|(n, _)| select(n)) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Load(format!("parameter `{name}` missing from model")))?;
            let target = &mut store.get_mut(id).value;
            if target.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "parameter `{name}` has shape {:?} in checkpoint but {:?} in model",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t.clone();
            copied += 1;
        }
        Ok(copied)
    }
}
