//! Checkpoint archives.
//!
//! Layout: the 8-byte magic `SDRVCKPT`, a little-endian `u32` header length,
//! the JSON header, then every tensor as little-endian `f32` in header order.
//! Values are rounded to `f32` on save, so a loaded checkpoint saves back to
//! the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};
use crate::policy::{Architecture, Policy};

const MAGIC: &[u8; 8] = b"SDRVCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    step: u64,
    train_config: Option<serde_json::Value>,
    rng_state: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// A policy plus the training context it was saved with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: Policy,
    pub step: u64,
    pub train_config: Option<serde_json::Value>,
    pub rng_state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(policy: Policy, step: u64) -> Self {
        Self { policy, step, train_config: None, rng_state: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.policy.params();
        let header = Header {
            format_version: FORMAT_VERSION,
            architecture: self.policy.arch().clone(),
            step: self.step,
            train_config: self.train_config.clone(),
            rng_state: self.rng_state.clone(),
            tensors: params
                .iter()
                .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape.clone() })
                .collect(),
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + head.len() + 4 * params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        for (_, _, t) in params.iter() {
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let parse = |message: String| Error::Parse { source_name: source_name.to_string(), line: 0, message };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(parse("not a checkpoint archive".into()));
        }
        let head_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + head_len).ok_or_else(|| parse("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| parse(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION.to_string(),
                found: header.format_version.to_string(),
            });
        }
        let mut offset = 12 + head_len;
        let mut params = ParamSet::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| parse(format!("truncated tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params.add(&entry.name, Tensor { shape: entry.shape.clone(), data });
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(parse(format!("{} trailing bytes", bytes.len() - offset)));
        }
        if !params.all_finite() {
            return Err(Error::NumericDomain(format!("{source_name}: non-finite tensor values")));
        }
        let policy = Policy::from_params(header.architecture, &params)?;
        Ok(Self { policy, step: header.step, train_config: header.train_config, rng_state: header.rng_state })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
