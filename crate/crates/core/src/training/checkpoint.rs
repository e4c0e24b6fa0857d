//! Binary checkpoint container.
//!
//! ```text
//! "CTLB0001" | u64 LE metadata length | metadata JSON | f32 LE payloads
//! ```
//!
//! Payload offsets in the tensor directory are relative to the first payload
//! byte. Optimizer moments, when present, follow the parameters.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::PretrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CTLB0001";

/// Provenance of a checkpoint's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Fingerprint of the run that produced these weights.
    pub fingerprint: String,
    /// Fingerprints of every training stage, oldest first.
    pub fingerprint_chain: Vec<String>,
    /// Optimizer steps taken across all stages.
    pub steps: usize,
    pub manifest_digest: String,
    /// Sha-256 over the per-step loss trace.
    pub trace_digest: String,
    pub pretrain: Option<PretrainConfig>,
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    numel: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: TrainingMeta,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl ModelCheckpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> =
            self.params.names().iter().cloned().zip(self.params.tensors()).collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adam.m.", &opt.first), ("adam.v.", &opt.second)] {
                out.extend(self.params.names().iter().map(|n| format!("{prefix}{n}")).zip(moments.iter()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named_tensors();
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let entry =
                    TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, numel: t.numel() as u64 };
                offset += 4 * t.numel() as u64;
                entry
            })
            .collect();
        let header = Header {
            model: self.config().clone(),
            meta: self.meta.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing CTLB0001 magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated metadata"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let payload = &bytes[body..];
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            let end = start + 4 * e.numel as usize;
            if end > payload.len() || e.shape.iter().product::<usize>() != e.numel as usize {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            named.push((e.name.clone(), Tensor::from_vec(e.shape.clone(), data)?));
        }
        let split = named.iter().position(|(n, _)| n.starts_with("adam.")).unwrap_or(named.len());
        let mut moments = named.split_off(split);
        let optimizer = match header.optimizer_step {
            None if moments.is_empty() => None,
            Some(step) if moments.len() == 2 * split => {
                let second = moments.split_off(split).into_iter().map(|(_, t)| t).collect();
                let first = moments.into_iter().map(|(_, t)| t).collect();
                Some(OptimizerState { step, first, second })
            }
            _ => return Err(bad("optimizer moments do not match parameters")),
        };
        let params = ModelParams::from_named(header.model, named)?;
        Ok(ModelCheckpoint { params, optimizer, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
