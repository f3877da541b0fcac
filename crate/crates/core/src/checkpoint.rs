//! `SKFM` checkpoint format.
//!
//! ```text
//! magic   "SKFM"
//! version u32
//! config  u32 length + UTF-8 TOML (merged flag, model and train config)
//! count   u32
//! entries { name_len u16, name, dtype u8 (0 = f32), rank u8, dims u32 x rank, payload }
//! ```
//!
//! All integers and payloads are little-endian; tensors are row-major.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SkillFormerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::SkillFormer;
use crate::numerics::Tensor;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"SKFM";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Adapters already folded into base weights.
    pub merged: bool,
    pub model: SkillFormerConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Named tensors in model registration order. Values are held at f32
    /// precision so the in-memory checkpoint equals its serialized form.
    pub tensors: Vec<(String, Tensor)>,
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &SkillFormer, store: &ParamStore) -> Self {
        Self {
            header: CheckpointHeader {
                merged: !model.has_adapters(),
                model: config.model.clone(),
                train: config.train.clone(),
            },
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), round_f32(&p.value)))
                .collect(),
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.header.model.clone(),
            train: self.header.train.clone(),
        }
    }

    /// Instantiate the model described by this checkpoint.
    pub fn model(&self) -> Result<(SkillFormer, ParamStore)> {
        let values: HashMap<String, Tensor> = self.tensors.iter().cloned().collect();
        if values.len() != self.tensors.len() {
            return Err(Error::Config("duplicate tensor names in checkpoint".into()));
        }
        SkillFormer::from_named(&self.header.model, !self.header.merged, values)
    }

    /// Checkpoint with every adapter folded into its base weight.
    pub fn merge(&self) -> Result<Checkpoint> {
        let (model, store) = self.model()?;
        let (merged, mstore) = model.merged(&store)?;
        Ok(Checkpoint::from_model(&self.run_config(), &merged, &mstore))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = toml::to_string(&self.header).expect("header serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4)? != MAGIC {
            return Err(cur.error("bad magic, expected SKFM"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(cur.error(&format!(
                "unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let len = cur.u32()? as usize;
        let start = cur.pos;
        let text = std::str::from_utf8(cur.take(len)?).map_err(|_| cur.error("config blob is not UTF-8"))?;
        let header: CheckpointHeader = toml::from_str(text).map_err(|e| Error::Parse {
            location: format!(
                "config blob at byte {}",
                start + e.span().map_or(0, |s| s.start)
            ),
            message: e.message().to_string(),
        })?;
        let count = cur.u32()? as usize;
        // every entry takes at least 8 bytes, so a corrupt count cannot
        // force a huge allocation
        let mut tensors = Vec::with_capacity(count.min(cur.remaining() / 8));
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| cur.error("tensor name is not UTF-8"))?
                .to_string();
            let dtype = cur.u8()?;
            if dtype != DTYPE_F32 {
                return Err(cur.error(&format!("unknown dtype code {dtype}")));
            }
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let bytes = shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| cur.error("tensor size overflows"))?;
            let data = cur
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| cur.error(&e.to_string()))?;
            tensors.push((name, t));
        }
        if !cur.is_at_end() {
            return Err(cur.error("trailing bytes after last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Little-endian reader that reports byte offsets in its errors.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn error(&self, msg: &str) -> Error {
        Error::Parse {
            location: format!("byte offset {}", self.pos),
            message: msg.to_string(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(&format!("unexpected end of input reading {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
