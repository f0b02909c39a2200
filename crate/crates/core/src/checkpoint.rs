//! Self-describing checkpoints: model config, parameters, optimiser moments
//! and the step counter, with a CRC over the binary payload.
//!
//! Floats are stored as base64 little-endian bytes so a round trip is exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::OptimizerState;

const FORMAT: &str = "forgeseg-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Seed the training run was started with; fixes the data order.
    pub train_seed: u64,
    pub step: u64,
    pub params: Vec<f32>,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OnDisk {
    format: String,
    version: u32,
    config: ModelConfig,
    config_hash: String,
    train_seed: u64,
    step: u64,
    optimizer_step: u64,
    params: String,
    first_moment: String,
    second_moment: String,
    crc32: u32,
}

fn encode(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn decode(field: &str, text: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Integrity(format!("{field}: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Integrity(format!("{field}: {} bytes is not a whole number of floats", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn checksum(parts: &[&[u8]]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for p in parts {
        h.update(p);
    }
    h.finalize()
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, optimizer: &OptimizerState, train_seed: u64, step: u64) -> Self {
        Self {
            config: model.config.clone(),
            train_seed,
            step,
            params: model.params.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let (p, m, v) = (
            encode(&self.params),
            encode(&self.optimizer.first_moment),
            encode(&self.optimizer.second_moment),
        );
        let disk = OnDisk {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            train_seed: self.train_seed,
            step: self.step,
            optimizer_step: self.optimizer.step,
            crc32: checksum(&[&p, &m, &v]),
            params: B64.encode(p),
            first_moment: B64.encode(m),
            second_moment: B64.encode(v),
        };
        Ok(serde_json::to_string(&disk)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let disk: OnDisk = serde_json::from_str(text).map_err(|e| Error::Integrity(e.to_string()))?;
        if disk.format != FORMAT || disk.version != VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint format {} v{}",
                disk.format, disk.version
            )));
        }
        if disk.config.hash() != disk.config_hash {
            return Err(Error::Integrity("stored config hash does not match the stored config".into()));
        }
        let params = decode("params", &disk.params)?;
        let first = decode("first_moment", &disk.first_moment)?;
        let second = decode("second_moment", &disk.second_moment)?;
        if checksum(&[&encode(&params), &encode(&first), &encode(&second)]) != disk.crc32 {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
        if first.len() != params.len() || second.len() != params.len() {
            return Err(Error::Integrity("optimizer moments do not match the parameter count".into()));
        }
        let ckpt = Self {
            config: disk.config,
            train_seed: disk.train_seed,
            step: disk.step,
            params,
            optimizer: OptimizerState {
                step: disk.optimizer_step,
                first_moment: first,
                second_moment: second,
            },
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads a checkpoint and rejects it if it was written for another model.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.config.hash() != expected.hash() {
            return Err(Error::Integrity(format!(
                "{} was written for a different model configuration",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}
