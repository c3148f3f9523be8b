//! Checkpoint file format.
//!
//! Layout: magic `RVT1`, a little-endian u32 length prefix, a JSON metadata
//! document (config, optional normalization stats, optional optimizer
//! hyperparameters, and a tensor index of name/shape/offset), then the
//! tensors as concatenated little-endian 32-bit float blobs. Offsets are
//! relative to the start of the blob section and strictly contiguous.

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{expected_params, ModelConfig, ParamSet};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RVT1";

/// Adam hyperparameters and step count persisted with the moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub t: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    #[serde(default)]
    normalize: Option<ChannelStats>,
    #[serde(default)]
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

/// A serializable model state: config, parameters, and optionally the
/// normalization stats and Adam moments it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub normalize: Option<ChannelStats>,
    pub optimizer: Option<(OptimizerMeta, Vec<Tensor>, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamSet) -> Self {
        Self { config, params, normalize: None, optimizer: None }
    }
}

// Real -> f32 is a no-op in the default build but required under `f64`.
#[allow(clippy::unnecessary_cast)]
fn blob_of(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    crate::model::validate_params(&ckpt.config, &ckpt.params)?;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in ckpt.params.iter() {
        tensors.push((name.to_string(), t));
    }
    if let Some((_, m, v)) = &ckpt.optimizer {
        if m.len() != ckpt.params.len() || v.len() != ckpt.params.len() {
            return Err(Error::invalid("optimizer moments misaligned with parameters"));
        }
        for ((name, _), t) in ckpt.params.iter().zip(m) {
            tensors.push((format!("adam.m.{name}"), t));
        }
        for ((name, _), t) in ckpt.params.iter().zip(v) {
            tensors.push((format!("adam.v.{name}"), t));
        }
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += (t.numel() * 4) as u64;
    }
    let meta = Metadata {
        config: ckpt.config.clone(),
        normalize: ckpt.normalize.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|(m, _, _)| m.clone()),
        tensors: entries,
    };
    let json =
        serde_json::to_vec(&meta).map_err(|e| Error::format(format!("metadata encoding: {e}")))?;
    let mut bytes = Vec::with_capacity(4 + 4 + json.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &tensors {
        bytes.extend_from_slice(&blob_of(t));
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format(format!("{}: bad magic, not a checkpoint", path.display())));
    }
    let json_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + json_len {
        return Err(Error::format(format!("{}: truncated metadata", path.display())));
    }
    let meta: Metadata = serde_json::from_slice(&bytes[8..8 + json_len])
        .map_err(|e| Error::format(format!("{}: metadata parse: {e}", path.display())))?;
    meta.config.validate()?;
    let blob = &bytes[8 + json_len..];

    // Layout audit: offsets must be contiguous and cover the blob exactly.
    let mut expected_offset = 0u64;
    for entry in &meta.tensors {
        if entry.offset != expected_offset {
            return Err(Error::format(format!(
                "{}: tensor '{}' at offset {}, expected {expected_offset}",
                path.display(),
                entry.name,
                entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel == 0 {
            return Err(Error::format(format!(
                "{}: tensor '{}' has empty shape",
                path.display(),
                entry.name
            )));
        }
        expected_offset += (numel * 4) as u64;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::format(format!(
            "{}: blob holds {} bytes, index expects {expected_offset}",
            path.display(),
            blob.len()
        )));
    }

    let read = |entry: &TensorEntry| -> Result<Tensor> {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let data: Vec<Real> = blob[start..start + numel * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        Tensor::new(entry.shape.clone(), data)
    };

    let expected = expected_params(&meta.config);
    let mut params = ParamSet::new();
    let mut m_moments: Vec<Tensor> = Vec::new();
    let mut v_moments: Vec<Tensor> = Vec::new();
    for entry in &meta.tensors {
        if let Some(rest) = entry.name.strip_prefix("adam.m.") {
            if meta.optimizer.is_none() {
                return Err(Error::format(format!(
                    "{}: moment tensor '{}' without optimizer metadata",
                    path.display(),
                    entry.name
                )));
            }
            if !expected.iter().any(|(n, _)| n == rest) {
                return Err(Error::format(format!(
                    "{}: unknown tensor name '{}'",
                    path.display(),
                    entry.name
                )));
            }
            m_moments.push(read(entry)?);
        } else if let Some(rest) = entry.name.strip_prefix("adam.v.") {
            if meta.optimizer.is_none() {
                return Err(Error::format(format!(
                    "{}: moment tensor '{}' without optimizer metadata",
                    path.display(),
                    entry.name
                )));
            }
            if !expected.iter().any(|(n, _)| n == rest) {
                return Err(Error::format(format!(
                    "{}: unknown tensor name '{}'",
                    path.display(),
                    entry.name
                )));
            }
            v_moments.push(read(entry)?);
        } else {
            match expected.iter().find(|(n, _)| n == &entry.name) {
                None => {
                    return Err(Error::format(format!(
                        "{}: unknown tensor name '{}'",
                        path.display(),
                        entry.name
                    )))
                }
                Some((_, shape)) if shape != &entry.shape => {
                    return Err(Error::format(format!(
                        "{}: tensor '{}' has shape {:?}, config expects {:?}",
                        path.display(),
                        entry.name,
                        entry.shape,
                        shape
                    )))
                }
                Some(_) => params.push(entry.name.clone(), read(entry)?.with_requires_grad()),
            }
        }
    }
    if params.len() != expected.len() {
        return Err(Error::format(format!(
            "{}: {} parameter tensors, config expects {}",
            path.display(),
            params.len(),
            expected.len()
        )));
    }
    let optimizer = match meta.optimizer {
        None => None,
        Some(opt_meta) => {
            if m_moments.len() != expected.len() || v_moments.len() != expected.len() {
                return Err(Error::format(format!(
                    "{}: optimizer metadata present but moments incomplete",
                    path.display()
                )));
            }
            Some((opt_meta, m_moments, v_moments))
        }
    };
    Ok(Checkpoint { config: meta.config, params, normalize: meta.normalize, optimizer })
}
