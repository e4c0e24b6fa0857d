use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;
use crate::textdata::{FIRST_WORD_ID, MASK_ID};

/// Fractions of selected positions replaced by `[MASK]`, by a random word,
/// or left unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for CorruptionSplit {
    fn default() -> Self {
        CorruptionSplit { mask: 0.8, random: 0.1, keep: 0.1 }
    }
}

impl CorruptionSplit {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.mask, self.random, self.keep];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "corruption split ({}, {}, {}) must be non-negative and sum to 1",
                self.mask, self.random, self.keep
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// Selection probability at label positions; `None` falls back to `mask_prob`.
    pub label_mask_prob: Option<f64>,
    pub split: CorruptionSplit,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { mask_prob: 0.15, label_mask_prob: None, split: CorruptionSplit::default() }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        for p in std::iter::once(self.mask_prob).chain(self.label_mask_prob) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("masking probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Corrupted inputs and per-position targets of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<u32>>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub targets: Vec<Vec<i64>>,
}

impl MaskedBatch {
    pub fn selected(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

/// Whether `id` may be selected for corruption.
pub fn is_maskable(id: u32) -> bool {
    id >= FIRST_WORD_ID
}

/// Dynamic MLM masking. `label_positions[i]` is the position of the injected
/// verbalizer in `seqs[i]`, if any. Reserved tokens are never selected.
pub fn mask_batch<R: Rng + ?Sized>(
    seqs: &[Vec<u32>],
    label_positions: &[Option<usize>],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    if label_positions.len() != seqs.len() {
        return Err(Error::shape(
            "mask_batch",
            format!("{} sequences, {} label positions", seqs.len(), label_positions.len()),
        ));
    }
    if cfg.split.random > 0.0 && vocab_size <= FIRST_WORD_ID as usize {
        return Err(Error::Config("random replacement needs at least one word token".into()));
    }
    let q = cfg.label_mask_prob.unwrap_or(cfg.mask_prob);
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len());
    for (seq, &label) in seqs.iter().zip(label_positions) {
        let mut input = seq.clone();
        let mut target = vec![IGNORE_INDEX; seq.len()];
        for (pos, &id) in seq.iter().enumerate() {
            if !is_maskable(id) {
                continue;
            }
            let p = if label == Some(pos) { q } else { cfg.mask_prob };
            if p <= 0.0 || !rng.random_bool(p) {
                continue;
            }
            target[pos] = i64::from(id);
            let u: f64 = rng.random();
            if u < cfg.split.mask {
                input[pos] = MASK_ID;
            } else if u < cfg.split.mask + cfg.split.random {
                input[pos] = rng.random_range(FIRST_WORD_ID..vocab_size as u32);
            }
        }
        inputs.push(input);
        targets.push(target);
    }
    Ok(MaskedBatch { inputs, targets })
}
