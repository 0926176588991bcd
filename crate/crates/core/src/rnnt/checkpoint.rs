//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4   magic "PRCT"
//! bytes 4..8   u32 format version (1)
//! bytes 8..12  u32 header length N
//! next N bytes UTF-8 JSON header:
//!              {"joint": JointConfig, "adapter": AdapterConfig | null,
//!               "vocab_hash": hex sha256, "tensors": [{"name", "shape"}, …]}
//! remainder    f64 values of each tensor in header order, row-major
//! ```
//!
//! Tensors are listed in sorted name order, so equal parameter sets always
//! serialize to equal bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{is_core_param, JointConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::procter::AdapterConfig;

const MAGIC: &[u8; 4] = b"PRCT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub joint: JointConfig,
    pub adapter: Option<AdapterConfig>,
    pub vocab_hash: String,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    joint: JointConfig,
    adapter: Option<AdapterConfig>,
    vocab_hash: String,
    tensors: Vec<TensorMeta>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            joint: self.joint.clone(),
            adapter: self.adapter.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + h.len() + 8 * self.params.count_where(|_| true));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, t) in self.params.iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 12 + hlen;
        let mut params = ParamSet::new();
        for meta in header.tensors {
            let n: usize = meta.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", meta.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(meta.name, Tensor::new(meta.shape, data)?);
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            joint: header.joint,
            adapter: header.adapter,
            vocab_hash: header.vocab_hash,
            params,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Loads and rejects a checkpoint trained against another vocabulary.
    pub fn load_for_vocab(path: &Path, vocab_hash: &str) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.check_vocab(vocab_hash)?;
        Ok(ck)
    }

    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                got: vocab_hash.to_string(),
            });
        }
        Ok(())
    }

    /// Core-only copy of the parameters.
    pub fn core_params(&self) -> ParamSet {
        let mut p = self.params.clone();
        p.split_off(|n| !is_core_param(n));
        p
    }
}
