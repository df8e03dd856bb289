//! Named-tensor archive.
//!
//! ```text
//! magic      8 bytes   "MOELPR1\0"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON (config, seed, tensor table, freeze flags)
//! data       f64 LE, row-major, tensors back to back in table order
//! checksum   SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{trainable_mask, Stage};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"MOELPR1\0";
pub const FORMAT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated ({len} bytes)")]
    Truncated { len: usize },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

/// Trainable flag for each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub stage1: bool,
    pub stage2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: ParamStore,
    /// Empty for dense models.
    pub freeze: BTreeMap<String, FreezeFlags>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: [usize; 2],
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct FreezeEntry {
    name: String,
    #[serde(flatten)]
    flags: FreezeFlags,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
    freeze: Vec<FreezeEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Result<Self> {
        let mut freeze = BTreeMap::new();
        if model.config().is_moe() {
            let s1 = trainable_mask(model, Stage::Stage1)?;
            let s2 = trainable_mask(model, Stage::Stage2)?;
            for name in model.params().names() {
                freeze.insert(
                    name.to_string(),
                    FreezeFlags {
                        stage1: s1.is_trainable(name),
                        stage2: s2.is_trainable(name),
                    },
                );
            }
        }
        Ok(Self {
            config: model.config().clone(),
            tensors: model.params().clone(),
            freeze,
            seed,
        })
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            let nbytes = (t.len() * 8) as u64;
            entries.push(TensorEntry {
                name: name.to_string(),
                dtype: "f64".into(),
                shape: t.shape(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            tensors: entries,
            freeze: self
                .freeze
                .iter()
                .map(|(name, &flags)| FreezeEntry {
                    name: name.clone(),
                    flags,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset as usize + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREFIX_LEN + CHECKSUM_LEN {
            return Err(CheckpointError::Truncated { len: bytes.len() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::ChecksumMismatch);
        }

        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or(CheckpointError::Truncated { len: bytes.len() })?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let data = &body[header_end..];

        let mut tensors = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(CheckpointError::Header(format!(
                    "tensor {} has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let count = e.shape[0] * e.shape[1];
            if e.offset != expected_offset || e.nbytes != (count * 8) as u64 {
                return Err(CheckpointError::Header(format!(
                    "tensor {} has inconsistent offset or size",
                    e.name
                )));
            }
            let start = e.offset as usize;
            let end = start + e.nbytes as usize;
            let raw = data
                .get(start..end)
                .ok_or(CheckpointError::Truncated { len: bytes.len() })?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors.contains(&e.name) {
                return Err(CheckpointError::Header(format!("tensor {} repeated", e.name)));
            }
            let t = Tensor::from_vec(e.shape, values).expect("size checked above");
            tensors.insert(e.name.clone(), t);
            expected_offset += e.nbytes;
        }
        if expected_offset as usize != data.len() {
            return Err(CheckpointError::Header(format!(
                "{} trailing data bytes",
                data.len() - expected_offset as usize
            )));
        }

        let mut freeze = BTreeMap::new();
        for f in header.freeze {
            if !tensors.contains(&f.name) {
                return Err(CheckpointError::Header(format!(
                    "freeze flags for unknown tensor {}",
                    f.name
                )));
            }
            freeze.insert(f.name, f.flags);
        }
        Ok(Self {
            config: header.config,
            tensors,
            freeze,
            seed: header.seed,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Read and fully validate a checkpoint; nothing is returned unless the
/// checksum and header are sound and the tensors form a complete model.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    ckpt.to_model()?;
    Ok(ckpt)
}
