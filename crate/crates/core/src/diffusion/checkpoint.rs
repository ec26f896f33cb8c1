//! Checkpoint container:
//!
//! ```text
//! DALCKPT1\n
//! <header length in bytes>\n
//! <TOML header: schedule, architecture, seed, dataset hash, tensor table>
//! <little-endian f32 tensor data in table order>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DiffusionModel, NoiseSchedule, ScheduleParams};
use crate::error::{DalError, Result};
use crate::nn::{ArchConfig, ParamStore, UNet};

const MAGIC: &[u8] = b"DALCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Content hash of the weights.
    pub model_id: String,
    pub image_size: usize,
    pub train_seed: u64,
    pub dataset_hash: String,
    pub schedule: ScheduleParams,
    pub arch: ArchConfig,
}

impl CheckpointMeta {
    pub fn new(
        params: &ParamStore<f32>,
        image_size: usize,
        train_seed: u64,
        dataset_hash: String,
        schedule: ScheduleParams,
        arch: ArchConfig,
    ) -> Self {
        CheckpointMeta {
            model_id: weights_hash(params),
            image_size,
            train_seed,
            dataset_hash,
            schedule,
            arch,
        }
    }
}

pub fn weights_hash(params: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for v in &params.data {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &DiffusionModel) -> Result<()> {
    let header = Header {
        format: "dal-checkpoint-1".into(),
        meta: model.meta.clone(),
        tensors: model
            .params
            .entries()
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&header)?;
    let mut out = Vec::with_capacity(text.len() + 32 + model.params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", text.len()).as_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in &model.params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DiffusionModel> {
    let bytes = std::fs::read(path)?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| DalError::Format("not a DAL checkpoint (bad magic)".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DalError::Format("truncated checkpoint".into()))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DalError::Format("bad checkpoint header length".into()))?;
    let rest = &rest[nl + 1..];
    if rest.len() < len {
        return Err(DalError::Format("truncated checkpoint header".into()));
    }
    let text = std::str::from_utf8(&rest[..len]).map_err(|e| DalError::Format(e.to_string()))?;
    let header: Header = toml::from_str(text)?;
    let data = &rest[len..];
    let meta = header.meta;
    let schedule = NoiseSchedule::new(meta.schedule.clone())?;
    // the initialiser seed is irrelevant: every value is overwritten below
    let (net, mut params) = UNet::new::<f32>(&meta.arch, &mut crate::rng::rng(0))?;
    if data.len() != params.len() * 4 {
        return Err(DalError::Format(format!(
            "checkpoint holds {} bytes of weights, architecture needs {}",
            data.len(),
            params.len() * 4
        )));
    }
    let mut values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")));
    let named: Vec<(String, Vec<usize>, Vec<f32>)> = header
        .tensors
        .into_iter()
        .map(|t| {
            let n = t.shape.iter().product();
            (t.name, t.shape, values.by_ref().take(n).collect())
        })
        .collect();
    params.load_named(&named)?;
    if params.data.iter().any(|v| !v.is_finite()) {
        return Err(DalError::NonFinite("checkpoint weights"));
    }
    if weights_hash(&params) != meta.model_id {
        return Err(DalError::Format("checkpoint weights do not match their recorded hash".into()));
    }
    Ok(DiffusionModel {
        net,
        params,
        schedule,
        image_size: meta.image_size,
        meta,
    })
}
