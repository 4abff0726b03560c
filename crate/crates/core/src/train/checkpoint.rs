//! XLCK checkpoint files.
//!
//! Layout: the 4-byte magic `XLCK`, a little-endian `u32` version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then every
//! tensor as raw little-endian `f64` values in header order. Tensors are
//! the model parameters followed by the Adam first and second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, TrainError};
use crate::model::{ModelParams, TransformerConfig};
use crate::synthlang::TaskKind;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub task: Option<TaskKind>,
    pub source_langs: Vec<String>,
}

/// Position in the counter-based random streams; together with the seed
/// it determines the data order and dropout masks from here on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub step: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: TransformerConfig,
    train_config: TrainConfig,
    step: usize,
    provenance: Provenance,
    rng: RngState,
    optimizer: OptimizerMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.params.tensors();
        let names = self.params.names();
        let mut tensors: Vec<(String, &Tensor)> = Vec::with_capacity(3 * params.len());
        tensors.extend(names.iter().cloned().zip(params));
        tensors.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&self.optimizer.m));
        tensors.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&self.optimizer.v));
        let header = Header {
            model_config: self.params.config().clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            provenance: self.provenance.clone(),
            rng: self.rng.clone(),
            optimizer: OptimizerMeta {
                step: self.optimizer.step,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
            },
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n_values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 4 {
            return Err(TrainError::Truncated);
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(TrainError::BadMagic);
        }
        let fixed = bytes.get(4..16).ok_or(TrainError::Truncated)?;
        let version = u32::from_le_bytes(fixed[..4].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(fixed[4..].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .ok_or(TrainError::Truncated)?;
        let json = bytes.get(16..header_end).ok_or(TrainError::Truncated)?;
        let header: Header = serde_json::from_slice(json).map_err(|e| TrainError::BadHeader(e.to_string()))?;
        let mut payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let nbytes = n.checked_mul(8).ok_or(TrainError::Truncated)?;
            if payload.len() < nbytes {
                return Err(TrainError::Truncated);
            }
            let (chunk, rest) = payload.split_at(nbytes);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data).map_err(|e| TrainError::BadHeader(e.to_string()))?);
        }
        if !payload.is_empty() {
            return Err(TrainError::BadHeader(format!(
                "{} trailing bytes after the last tensor",
                payload.len()
            )));
        }
        let n_params = header.model_config.layout().len();
        if tensors.len() != 3 * n_params {
            return Err(TrainError::BadHeader(format!(
                "expected {} tensors, found {}",
                3 * n_params,
                tensors.len()
            )));
        }
        let v = tensors.split_off(2 * n_params);
        let m = tensors.split_off(n_params);
        let params = ModelParams::from_parts(header.model_config, tensors)?;
        if m.iter()
            .chain(&v)
            .zip(params.tensors().iter().cycle())
            .any(|(a, p)| a.shape() != p.shape())
        {
            return Err(TrainError::BadHeader("moment shapes differ from parameters".into()));
        }
        Ok(Checkpoint {
            train_config: header.train_config,
            step: header.step,
            params,
            optimizer: OptimizerState {
                step: header.optimizer.step,
                beta1: header.optimizer.beta1,
                beta2: header.optimizer.beta2,
                eps: header.optimizer.eps,
                m,
                v,
            },
            rng: header.rng,
            provenance: header.provenance,
        })
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ck.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
