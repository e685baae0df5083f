//! Binary model checkpoints.
//!
//! Layout (little endian): magic `GKSN`, `u32` version, `u32` length plus the
//! model config as JSON, `u32` tensor count, then per tensor a `u32`-prefixed
//! name, a kind byte, a `u32` rank, `u64` dims and `f64` data. A 64-bit
//! FNV-1a checksum of all preceding bytes closes the file.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{GksError, Result};
use crate::model::{model_init, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::SupportSet;

pub const MAGIC: &[u8; 4] = b"GKSN";
pub const VERSION: u32 = 1;

const KIND_TRAINABLE: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_SUPPORT: u8 = 2;
const SUPPORT_PATCHES: &str = "support.patches";
const SUPPORT_LABELS: &str = "support.labels";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub support: Option<SupportSet>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(kind);
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        let cfg = serde_json::to_vec(&self.config)?;
        put_u32(&mut buf, cfg.len() as u32);
        buf.extend_from_slice(&cfg);
        let support_count = if self.support.is_some() { 2 } else { 0 };
        let count = self.params.trainable.len() + self.params.buffers.len() + support_count;
        put_u32(&mut buf, count as u32);
        for (n, t) in &self.params.trainable {
            put_tensor(&mut buf, n, KIND_TRAINABLE, t);
        }
        for (n, t) in &self.params.buffers {
            put_tensor(&mut buf, n, KIND_BUFFER, t);
        }
        if let Some(s) = &self.support {
            put_tensor(&mut buf, SUPPORT_PATCHES, KIND_SUPPORT, &s.patches);
            let labels = Tensor::new(&[s.len()], s.labels.iter().map(|&l| l as f64).collect())?;
            put_tensor(&mut buf, SUPPORT_LABELS, KIND_SUPPORT, &labels);
        }
        let sum = fnv1a(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        Ok(buf)
    }

    /// Parses a checkpoint. `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let format = |msg: &str| GksError::Format {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(format("not a model checkpoint (bad magic)"));
        }
        if bytes.len() < 16 {
            return Err(GksError::Truncated {
                path: origin.to_path_buf(),
            });
        }
        let mut r = Reader {
            bytes: &bytes[..bytes.len() - 8],
            pos: 4,
            origin,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(GksError::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a(&bytes[..bytes.len() - 8]) != stored {
            return Err(format("checksum mismatch"));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        config.validate()?;
        let count = r.u32()? as usize;
        let mut trainable = IndexMap::new();
        let mut buffers = IndexMap::new();
        let mut support_patches = None;
        let mut support_labels = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| format("tensor name is not UTF-8"))?;
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > crate::tensor::MAX_RANK {
                return Err(format("tensor rank too large"));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| format("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&dims, data)?;
            match (kind, name.as_str()) {
                (KIND_TRAINABLE, _) => {
                    trainable.insert(name, t);
                }
                (KIND_BUFFER, _) => {
                    buffers.insert(name, t);
                }
                (KIND_SUPPORT, SUPPORT_PATCHES) => support_patches = Some(t),
                (KIND_SUPPORT, SUPPORT_LABELS) => support_labels = Some(t),
                _ => return Err(format(&format!("unknown tensor entry {name}"))),
            }
        }
        if r.pos != r.bytes.len() {
            return Err(format("trailing bytes after tensors"));
        }
        let support = match (support_patches, support_labels) {
            (Some(patches), Some(labels)) => {
                if patches.rank() != 4 || patches.shape()[0] != labels.len() {
                    return Err(format("support set shapes disagree"));
                }
                Some(SupportSet {
                    patches,
                    labels: labels.data().iter().map(|&v| v as u8).collect(),
                })
            }
            (None, None) => None,
            _ => return Err(format("incomplete support set")),
        };
        let params = ModelParams { trainable, buffers };
        check_layout(&config, &params)?;
        Ok(Checkpoint {
            config,
            params,
            support,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| GksError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GksError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and rejects checkpoints whose stored config differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(GksError::ConfigMismatch(format!(
                "checkpoint has {}, expected {}",
                serde_json::to_string(&ck.config)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(ck)
    }
}

/// Parameter names and shapes must match a fresh model of `config`.
fn check_layout(config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let reference = model_init(config, 0)?;
    let same = |a: &IndexMap<String, Tensor>, b: &IndexMap<String, Tensor>| {
        a.len() == b.len()
            && a.iter()
                .all(|(n, t)| b.get(n).is_some_and(|u| u.shape() == t.shape()))
    };
    if !same(&reference.trainable, &params.trainable) || !same(&reference.buffers, &params.buffers) {
        return Err(GksError::ConfigMismatch(
            "stored tensors do not match the stored model config".into(),
        ));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GksError::Truncated {
                path: self.origin.to_path_buf(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
