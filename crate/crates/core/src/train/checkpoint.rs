//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//! `MAGIC | u32 version | u64 meta_len | meta JSON | u32 n_tensors |
//! n x (u32 name_len | name | u32 ndim | u64 dims.. | f32 data..) | u32 crc32`.
//! The CRC covers every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamState, EarlyStopping};
use super::{EpochRecord, ModelKind, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::model::{ModelConfig, Param, WeightSet};

pub const MAGIC: &[u8; 8] = b"MTFLOWCK";
pub const VERSION: u32 = 1;

const WEIGHTS: &str = "weights/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: WeightSet<f32>,
    pub adam: AdamState<f32>,
    /// First epoch not yet run.
    pub next_epoch: usize,
    pub early_stopping: EarlyStopping,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    kind: ModelKind,
    model: ModelConfig,
    train: TrainConfig,
    model_fingerprint: u64,
    adam_step: u64,
    next_epoch: usize,
    early_stopping: EarlyStopping,
    history: Vec<EpochRecord>,
}

fn corrupted(msg: impl Into<String>) -> Error {
    Error::CorruptedCheckpoint(msg.into())
}

fn put_tensor(buf: &mut Vec<u8>, prefix: &str, p: &Param<f32>) {
    let name = format!("{prefix}{}", p.name);
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
    for &d in &p.shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &p.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            kind: self.kind,
            model: self.model.clone(),
            train: self.train.clone(),
            model_fingerprint: self.model.fingerprint(),
            adam_step: self.adam.step,
            next_epoch: self.next_epoch,
            early_stopping: self.early_stopping.clone(),
            history: self.history.clone(),
        };
        let meta = serde_json::to_vec_pretty(&meta)?;
        let mut buf = Vec::with_capacity(meta.len() + 12 * self.weights.num_scalars() + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(3 * self.weights.len() as u32).to_le_bytes());
        for (prefix, set) in [(WEIGHTS, &self.weights), (ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for p in set.params() {
                put_tensor(&mut buf, prefix, p);
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupted("bad magic header"));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < r.pos + 4 {
            return Err(corrupted("truncated file"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupted("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let meta_len = r.u64()? as usize;
        let meta: Metadata =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupted(format!("metadata: {e}")))?;
        if meta.model.fingerprint() != meta.model_fingerprint {
            return Err(corrupted("model config does not match its fingerprint"));
        }
        let count = r.u32()? as usize;
        let mut sets = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupted("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| corrupted("tensor too large"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| corrupted("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (slot, base) = [WEIGHTS, ADAM_M, ADAM_V]
                .iter()
                .enumerate()
                .find_map(|(i, p)| name.strip_prefix(p).map(|b| (i, b.to_string())))
                .ok_or_else(|| corrupted(format!("unknown tensor {name}")))?;
            sets[slot].push(Param {
                name: base,
                shape,
                data,
            });
        }
        if r.pos != body.len() {
            return Err(corrupted("trailing bytes after tensors"));
        }
        let [w, m, v] = sets;
        let weights = WeightSet::from_params(w);
        let m = WeightSet::from_params(m);
        let v = WeightSet::from_params(v);
        let expected = WeightSet::<f32>::zeros(crate::model::Layout::new(&meta.model).specs());
        expected
            .ensure_same_keys(&weights)
            .and_then(|_| expected.ensure_same_keys(&m))
            .and_then(|_| expected.ensure_same_keys(&v))
            .map_err(|e| corrupted(format!("tensors do not match model config: {e}")))?;
        Ok(Self {
            kind: meta.kind,
            model: meta.model,
            train: meta.train,
            weights,
            adam: AdamState {
                m,
                v,
                step: meta.adam_step,
            },
            next_epoch: meta.next_epoch,
            early_stopping: meta.early_stopping,
            history: meta.history,
        })
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partially written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_path("creating", parent)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?).with_path("writing", &tmp)?;
        fs::rename(&tmp, path).with_path("renaming", &tmp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).with_path("reading", path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupted("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
