//! Checkpoint file layout:
//!
//! ```text
//! magic    8 bytes  "DMAECKPT"
//! version  u32 LE
//! meta_len u64 LE
//! meta     JSON: configs, step, rng state, dtype, tensor manifest
//! payload  little-endian tensors in manifest order
//! checksum u64 LE, first 8 bytes of SHA-256 over everything above
//! ```
//!
//! The manifest lists the parameters, then the Adam first moments, then the
//! second moments, each under its own name.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DiffMae, ModelConfig};
use crate::numerics::{RngState, Scalar, Tensor};

use super::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Parameter values in registration order, named by `names`.
    pub params: Vec<Tensor<T>>,
    pub names: Vec<String>,
    pub adam: AdamState<T>,
    pub rng: RngState,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    dtype: String,
    step: u64,
    adam_step: u64,
    rng: RngState,
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn digest(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn build_model(&self) -> Result<DiffMae<T>> {
        let model = DiffMae::with_values(self.model.clone(), self.params.clone())?;
        for (p, name) in model.params().iter().zip(&self.names) {
            if &p.name != name {
                return Err(corrupt(format!("parameter `{name}` where `{}` was expected", p.name)));
            }
        }
        Ok(model)
    }

    fn tensors(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        let n = self.names.iter();
        n.clone()
            .zip(&self.params)
            .map(|(n, t)| (n.clone(), t))
            .chain(n.clone().zip(&self.adam.m).map(|(n, t)| (format!("adam.m.{n}"), t)))
            .chain(n.zip(&self.adam.v).map(|(n, t)| (format!("adam.v.{n}"), t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.names.len() != self.params.len() || self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(corrupt("parameter, name and moment counts differ"));
        }
        let meta = Meta {
            dtype: T::DTYPE.to_string(),
            step: self.step,
            adam_step: self.adam.step,
            rng: self.rng,
            model: self.model.clone(),
            train: self.train.clone(),
            tensors: self.tensors().map(|(name, t)| TensorEntry { name, shape: t.shape().to_vec() }).collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(meta.len() + 3 * T::BYTES * self.params.iter().map(Tensor::numel).sum::<usize>() + 28);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in self.tensors() {
            for &v in t.data() {
                v.push_le(&mut out);
            }
        }
        let sum = digest(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 {
            return Err(corrupt("file truncated"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = digest(body);
        if stored != computed {
            return Err(Error::Digest { stored, computed });
        }
        let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let meta_end = 20usize.checked_add(meta_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("file truncated"))?;
        let meta: Meta = serde_json::from_slice(&body[20..meta_end])?;
        if meta.dtype != T::DTYPE {
            return Err(corrupt(format!("payload is {}, requested {}", meta.dtype, T::DTYPE)));
        }
        let mut payload = &body[meta_end..];
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for entry in &meta.tensors {
            let n: usize = entry.shape.iter().product();
            let len = n * T::BYTES;
            if payload.len() < len {
                return Err(corrupt(format!("payload truncated in `{}`", entry.name)));
            }
            let data = payload[..len].chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
            payload = &payload[len..];
        }
        if !payload.is_empty() {
            return Err(corrupt(format!("{} trailing payload bytes", payload.len())));
        }
        if tensors.len() % 3 != 0 {
            return Err(corrupt("manifest is not params + two moment sets"));
        }
        let n = tensors.len() / 3;
        let names: Vec<String> = meta.tensors[..n].iter().map(|e| e.name.clone()).collect();
        let v = tensors.split_off(2 * n);
        let m = tensors.split_off(n);
        Ok(Self {
            model: meta.model,
            train: meta.train,
            params: tensors,
            names,
            adam: AdamState { m, v, step: meta.adam_step },
            rng: meta.rng,
            step: meta.step,
        })
    }
}

/// Write atomically: a sibling temp file, then rename over `path`.
pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
