//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the little-endian `f32` payload, and a SHA-256 of everything before
//! it. The header names every tensor with its shape and payload offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HierarchyModel, ModelConfig};
use crate::nn::OptimizerKind;
use crate::training::{EpochRecord, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"FSTRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fingerprint: String,
    pub epoch: usize,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_hit1: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    /// Snapshots the model and, when given, the trainer state needed to resume.
    pub fn capture(model: &HierarchyModel, train: &TrainConfig, trainer: Option<&Trainer>) -> Self {
        let mut tensors = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |name: &str, role: TensorRole, shape: &[usize], data: &[f64]| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                shape: shape.to_vec(),
                offset: payload.len(),
            });
            payload.extend(data.iter().map(|&v| v as f32));
        };
        for (_, p) in model.store().iter() {
            push(&p.name, TensorRole::Param, &p.shape, &p.data);
        }
        if let Some(t) = trainer {
            let (m, v) = t.optimizer().moments();
            for (slot, &id) in t.trainable().iter().enumerate().filter(|_| !m.is_empty()) {
                let p = model.store().param(id);
                push(&p.name, TensorRole::AdamM, &p.shape, &m[slot]);
                push(&p.name, TensorRole::AdamV, &p.shape, &v[slot]);
            }
        }
        let header = CheckpointHeader {
            model: model.config().clone(),
            train: train.clone(),
            fingerprint: model.config().fingerprint(),
            epoch: trainer.map_or(0, Trainer::epoch),
            optimizer: train.optimizer,
            optimizer_step: trainer.map_or(0, |t| t.optimizer().steps_taken()),
            history: trainer.map(|t| t.history().to_vec()).unwrap_or_default(),
            best_epoch: trainer.and_then(Trainer::best_epoch),
            best_hit1: trainer.and_then(Trainer::best_hit1),
            tensors,
        };
        Self { header, payload }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::json("checkpoint header", e))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 4 * self.payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and fully verifies a checkpoint; nothing is returned unless
    /// every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(Error::Integrity(format!("file is {} bytes, too short to be a checkpoint", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad magic; not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch; file is truncated or corrupt".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_bytes = body
            .len()
            .checked_sub(PREFIX_LEN)
            .and_then(|n| n.checked_sub(header_len))
            .ok_or_else(|| Error::Integrity("header length exceeds file size".into()))?;
        if payload_bytes % 4 != 0 {
            return Err(Error::Integrity("payload is not a whole number of f32 values".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[PREFIX_LEN..PREFIX_LEN + header_len])
            .map_err(|e| Error::json("checkpoint header", e))?;
        let payload: Vec<f32> = body[PREFIX_LEN + header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        for t in &header.tensors {
            let end = t.offset + t.shape.iter().product::<usize>();
            if end > payload.len() {
                return Err(Error::Integrity(format!("tensor {} runs past the payload", t.name)));
            }
        }
        Ok(Self { header, payload })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensor(&self, role: TensorRole, name: &str) -> Option<(&TensorEntry, &[f32])> {
        let t = self.header.tensors.iter().find(|t| t.role == role && t.name == name)?;
        let n: usize = t.shape.iter().product();
        Some((t, &self.payload[t.offset..t.offset + n]))
    }

    fn checked(&self, role: TensorRole, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let (t, data) = self
            .tensor(role, name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                found: t.shape.clone(),
                expected: shape.to_vec(),
            });
        }
        Ok(data)
    }

    /// Copies the parameters into `model`. Every tensor is checked before any
    /// is written.
    pub fn apply_to(&self, model: &mut HierarchyModel) -> Result<()> {
        let mut values = Vec::with_capacity(model.store().len());
        for (id, p) in model.store().iter() {
            let data = self.checked(TensorRole::Param, &p.name, &p.shape)?;
            values.push((id, data));
        }
        let extra: Vec<&str> = self
            .header
            .tensors
            .iter()
            .filter(|t| t.role == TensorRole::Param && model.store().find(&t.name).is_none())
            .map(|t| t.name.as_str())
            .collect();
        if !extra.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint has tensors the configured model lacks: {}",
                extra.join(", ")
            )));
        }
        for (id, data) in values {
            for (dst, &src) in model.store_mut().get_mut(id).iter_mut().zip(data) {
                *dst = src as f64;
            }
        }
        Ok(())
    }

    /// Builds the model described by the embedded config and loads it.
    pub fn build_model(&self) -> Result<HierarchyModel> {
        let mut model = HierarchyModel::new(&self.header.model, self.header.train.seed)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Builds a trainer positioned at the saved epoch with the saved
    /// optimizer state. The best-validation snapshot is not included.
    pub fn resume_trainer(&self, model: &HierarchyModel, train: &TrainConfig) -> Result<Trainer> {
        let mut trainer = Trainer::new(model, train)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        if train.optimizer == OptimizerKind::Adam && self.header.optimizer == OptimizerKind::Adam {
            for &id in trainer.trainable() {
                let p = model.store().param(id);
                let widen = |d: &[f32]| d.iter().map(|&x| x as f64).collect::<Vec<f64>>();
                m.push(widen(self.checked(TensorRole::AdamM, &p.name, &p.shape)?));
                v.push(widen(self.checked(TensorRole::AdamV, &p.name, &p.shape)?));
            }
        } else if train.optimizer == OptimizerKind::Adam {
            return Err(Error::Config("checkpoint holds no adam state to resume from".into()));
        }
        trainer.restore(self.header.epoch, self.header.history.clone(), self.header.optimizer_step, (m, v));
        Ok(trainer)
    }

    /// Parameter values in store order, for seeding a trainer's best snapshot.
    pub fn param_values(&self, model: &HierarchyModel) -> Result<Vec<Vec<f64>>> {
        model
            .store()
            .iter()
            .map(|(_, p)| {
                self.checked(TensorRole::Param, &p.name, &p.shape)
                    .map(|d| d.iter().map(|&x| x as f64).collect())
            })
            .collect()
    }
}
