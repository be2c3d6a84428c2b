//! Binary checkpoints: model configuration, parameters and optimizer state.
//!
//! Layout (little endian):
//!
//! ```text
//! "STVQACKP"  u32 version  u32 meta_len  meta (TOML, UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u32 dims[rank]  f32 data[numel]
//! ```
//!
//! Tensors are the parameters in declaration order followed by the ADAM first
//! and second moments under `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamConfig, OptimizerState};

pub const MAGIC: &[u8; 8] = b"STVQACKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    /// Free-form run settings recorded for provenance.
    #[serde(default)]
    pub run: toml::Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &OptimizerState, seed: u64, run: toml::Table) -> Self {
        Self {
            meta: CheckpointMeta {
                seed,
                step: optimizer.step,
                adam: optimizer.config,
                model: model.config.clone(),
                run,
            },
            params: model.store().clone(),
            optimizer: optimizer.clone(),
        }
    }

    /// Rebuilds the model, checking that every stored block matches the
    /// layout implied by the stored configuration.
    pub fn model(&self) -> Result<Model> {
        Model::with_params(self.meta.model.clone(), &self.params)
    }

    /// Checks that a requested configuration agrees with the stored one.
    pub fn check_compatible(&self, requested: &ModelConfig) -> Result<()> {
        let stored = &self.meta.model;
        if stored.variant != requested.variant {
            return Err(Error::Config(format!(
                "checkpoint holds variant {}, config requests {}",
                stored.variant.key(),
                requested.variant.key()
            )));
        }
        for (field, a, b) in [
            ("hidden", stored.hidden, requested.hidden),
            ("embed_dim", stored.embed_dim, requested.embed_dim),
            ("attention_hidden", stored.attention_hidden, requested.attention_hidden),
            ("frame_channels", stored.frame_channels, requested.frame_channels),
            ("clip_channels", stored.clip_channels, requested.clip_channels),
            ("grid", stored.grid, requested.grid),
        ] {
            if a != b {
                return Err(Error::DimMismatch { field: field.into(), stored: a, requested: b });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Invalid(format!("checkpoint meta: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, 3 * self.params.len());
        for (_, name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        for (prefix, moments) in [("adam.m/", &self.optimizer.first), ("adam.v/", &self.optimizer.second)] {
            for ((_, name, _), t) in self.params.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).map_err(&fail)?;
        if magic != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let meta_len = r.u32().map_err(&fail)? as usize;
        let meta = std::str::from_utf8(r.take(meta_len).map_err(&fail)?).map_err(|e| fail(format!("meta: {e}")))?;
        let meta: CheckpointMeta = toml::from_str(meta).map_err(|e| fail(format!("meta: {e}")))?;

        let count = r.u32().map_err(&fail)? as usize;
        if !count.is_multiple_of(3) {
            return Err(fail(format!("tensor count {count} is not parameters plus two moments")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor().map_err(&fail)?);
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let n = count / 3;
        let mut params = ParamStore::new();
        for (name, t) in &tensors[..n] {
            params.insert(name, t.clone());
        }
        let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for (k, prefix) in ["adam.m/", "adam.v/"].into_iter().enumerate() {
            for (i, (name, t)) in tensors[(k + 1) * n..(k + 2) * n].iter().enumerate() {
                let expected = format!("{prefix}{}", params.name(params.ids().nth(i).expect("index")));
                if *name != expected || t.shape() != tensors[i].1.shape() {
                    return Err(fail(format!("moment `{name}` does not match parameter `{expected}`")));
                }
                moments[k].push(t.clone());
            }
        }
        let [first, second] = moments;
        let optimizer = OptimizerState { config: meta.adam, step: meta.step, first, second };
        Ok(Self { meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> std::result::Result<(String, Tensor), String> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|e| format!("tensor name: {e}"))?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(format!("tensor `{name}` has unsupported rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let raw = self.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        Ok((name, t))
    }
}
