//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `I2CE` |
//! | 4     | `u32` format version |
//! | 8     | `u64` header length `n` |
//! | n     | UTF-8 JSON header: configs, vocabulary, RNG state, parameter table |
//! | rest  | every parameter as raw `f64`, in header order |

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{AutoEncoder, ModelConfig, ModelError};
use crate::objectives::LossConfig;
use crate::scalar::Real;
use crate::text::Vocab;

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"I2CE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} unexpected bytes after the last parameter block")]
    TrailingBytes(usize),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("parameter table mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position of the training RNG, enough to resume the exact stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte ChaCha seed.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (128-bit).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: AutoEncoder<T>,
    pub vocab: Vocab,
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    vocab: Vocab,
    train_config: TrainConfig,
    loss_config: LossConfig,
    epoch: usize,
    rng: RngState,
    params: Vec<ParamEntry>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.model.named_params();
        let header = Header {
            model_config: *self.model.config(),
            vocab: self.vocab.clone(),
            train_config: self.train_config.clone(),
            loss_config: self.loss_config,
            epoch: self.epoch,
            rng: self.rng.clone(),
            params: named
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = named.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * total);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in named {
            for &v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            if cursor.len() < n {
                return Err(CheckpointError::Truncated);
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(header_len)?)?;

        let mut model = AutoEncoder::<T>::zeros(header.model_config)?;
        {
            let mut named = model.named_params_mut();
            if named.len() != header.params.len() {
                return Err(CheckpointError::Params(format!(
                    "expected {} parameter groups, header lists {}",
                    named.len(),
                    header.params.len()
                )));
            }
            for ((name, tensor), entry) in named.iter_mut().zip(&header.params) {
                if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
                    return Err(CheckpointError::Params(format!(
                        "expected {name} {:?}, found {} {:?}",
                        tensor.shape(),
                        entry.name,
                        entry.shape
                    )));
                }
                let raw = take(8 * tensor.len())?;
                for (dst, chunk) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                    let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                    *dst = T::lit(v);
                }
            }
        }
        if !cursor.is_empty() {
            return Err(CheckpointError::TrailingBytes(cursor.len()));
        }
        Ok(Self {
            model,
            vocab: header.vocab,
            train_config: header.train_config,
            loss_config: header.loss_config,
            epoch: header.epoch,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Widens/narrows parameters between scalar types through `f64`.
pub fn convert_model<A: Real, B: Real>(model: &AutoEncoder<A>) -> AutoEncoder<B> {
    let mut out = AutoEncoder::<B>::zeros(*model.config()).expect("config already validated");
    for ((_, src), (_, dst)) in model.named_params().into_iter().zip(out.named_params_mut()) {
        let data: Vec<B> = src.data().iter().map(|v| B::lit(v.as_f64())).collect();
        *dst = Tensor::new(src.shape().to_vec(), data).expect("same shape");
    }
    out
}
