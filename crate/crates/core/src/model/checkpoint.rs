//! Self-contained model archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order. Output
//! bytes depend only on the contents.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DateModel, ModelConfig, ModelError};
use crate::autodiff::Tensor;
use crate::corpus::Vocab;
use crate::maskpat::PatternSet;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DATECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Hash of the run configuration that produced the model.
    pub config_hash: String,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub patterns: PatternSet,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (training step, preprocessing rules, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A model together with everything needed to score new text.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config_hash: String,
    pub model: DateModel<T>,
    pub vocab: Vocab,
    pub patterns: PatternSet,
    pub extra: serde_json::Value,
}

fn err(msg: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(msg.to_string())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (_, name, t) in self.model.params.iter() {
            tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
            offset += t.len();
        }
        let header = CheckpointHeader {
            config_hash: self.config_hash.clone(),
            model: self.model.config.clone(),
            vocab: self.vocab.clone(),
            patterns: self.patterns.clone(),
            tensors,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(err)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.model.params.iter() {
            for v in t.values() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (header, data) = read_header(bytes)?;
        let floats: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if data.len() % 4 != 0 {
            return Err(err("data section is not a whole number of f32 values"));
        }
        let mut model = DateModel::<T>::new(header.model.clone(), 0)?;
        if header.tensors.len() != model.params.len() {
            return Err(err(format!("{} tensors stored, model layout has {}", header.tensors.len(), model.params.len())));
        }
        for entry in &header.tensors {
            let id = model.params.id(&entry.name).ok_or_else(|| err(format!("unknown tensor `{}`", entry.name)))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != entry.shape.as_slice() {
                return Err(err(format!("tensor `{}` has shape {:?}, expected {:?}", entry.name, entry.shape, slot.shape())));
            }
            let n = slot.len();
            let src = floats
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| err(format!("tensor `{}` runs past the data section", entry.name)))?;
            let values = src.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
            *slot = Tensor::new(entry.shape.clone(), values)?.trained();
        }
        Ok(Self { config_hash: header.config_hash, model, vocab: header.vocab, patterns: header.patterns, extra: header.extra })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes).map_err(|e| err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Parses only the header, leaving the tensor data untouched.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), ModelError> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(err("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| err("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(err)?;
    Ok((header, &bytes[20 + len..]))
}

/// Hex SHA-256 of a checkpoint's bytes.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
