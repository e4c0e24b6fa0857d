//! Masked-language-model pretraining.

mod checkpoint;
mod masking;
mod optim;
mod schedule;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{ModelCheckpoint, TrainingMeta, MAGIC};
pub use masking::{is_maskable, mask_batch, CorruptionSplit, MaskedBatch, MaskingConfig};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, warmup_steps, LrPolicy};

use crate::contamination::{ContaminationManifest, Placement, UNCONTAMINATED};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TokenBatch};
use crate::tensor::{Tape, Tensor, IGNORE_INDEX};
use crate::textdata::{frame_ids, Vocab};

const SHUFFLE_STREAM: u64 = 0x0005_4855_4646_4c45;
const MASK_STREAM: u64 = 0x0000_4d41_534b_494e;
const DROPOUT_STREAM: u64 = 0x0044_524f_504f_5554;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub lr_policy: LrPolicy,
    pub epochs: usize,
    pub mask_prob: f64,
    /// Overrides `mask_prob` at injected label positions.
    pub label_mask_prob: Option<f64>,
    pub corruption_split: CorruptionSplit,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 32,
            peak_lr: 5e-5,
            lr_policy: LrPolicy::LinearWarmupDecay { warmup_fraction: 0.1 },
            epochs: 1,
            mask_prob: 0.15,
            label_mask_prob: None,
            corruption_split: CorruptionSplit::default(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            clip_norm: Some(1.0),
            seed: 0,
            deterministic: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("peak_lr {}", self.peak_lr)));
        }
        match self.lr_policy {
            LrPolicy::LinearWarmupDecay { warmup_fraction } if !(0.0..1.0).contains(&warmup_fraction) => {
                return Err(Error::Config(format!("warmup_fraction {warmup_fraction} outside [0, 1)")));
            }
            LrPolicy::Constant { value } if !(value.is_finite() && value >= 0.0) => {
                return Err(Error::Config(format!("constant lr {value}")));
            }
            _ => {}
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c}")));
            }
        }
        self.masking().validate()
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig { mask_prob: self.mask_prob, label_mask_prob: self.label_mask_prob, split: self.corruption_split }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn total_steps(&self, lines: usize) -> usize {
        self.epochs * lines.div_ceil(self.batch_size)
    }
}

/// Sha-256 over the canonical JSON of `value`.
pub fn fingerprint<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("fingerprinted values serialize");
    hex::encode(Sha256::digest(&json))
}

pub fn vocab_digest(vocab: &Vocab) -> String {
    fingerprint(&vocab.tokens())
}

/// Framed token ids of every corpus line plus the position of its injected
/// verbalizer, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    pub seqs: Vec<Vec<u32>>,
    pub label_positions: Vec<Option<usize>>,
}

impl EncodedCorpus {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Tokenizes and frames `lines` without padding. Injected lines listed in
/// `manifest` get their verbalizer position, unless truncation dropped it.
pub fn encode_corpus(
    lines: &[String],
    manifest: Option<&ContaminationManifest>,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<EncodedCorpus> {
    if let Some(m) = manifest {
        if m.total_lines != lines.len() {
            return Err(Error::Invalid(format!(
                "manifest describes {} lines, corpus has {}",
                m.total_lines,
                lines.len()
            )));
        }
    }
    let injected = manifest.map(|m| m.injected_by_line()).unwrap_or_default();
    let format = manifest.map(|m| m.plan.label_format).unwrap_or_default();
    let mut seqs = Vec::with_capacity(lines.len());
    let mut label_positions = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let ids = vocab.ids(line);
        let kept = ids.len().min(max_seq_len.saturating_sub(2));
        let mut framed = frame_ids(&ids, max_seq_len);
        framed.truncate(kept + 2);
        let label = if injected.contains_key(&i) && !ids.is_empty() {
            let pos = 1 + format.label_offset(ids.len() - 1);
            (pos <= kept).then_some(pos)
        } else {
            None
        };
        seqs.push(framed);
        label_positions.push(label);
    }
    Ok(EncodedCorpus { seqs, label_positions })
}

/// Line indices of every optimizer step. Shuffled placement reshuffles the
/// corpus each epoch; stage placement keeps file order so sections are
/// consumed in sequence. The last partial batch is kept.
pub fn batch_schedule(
    num_lines: usize,
    batch_size: usize,
    epochs: usize,
    placement: &Placement,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut steps = Vec::with_capacity(epochs * num_lines.div_ceil(batch_size.max(1)));
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..num_lines).collect();
        if matches!(placement, Placement::Shuffled) {
            order.shuffle(&mut rng);
        }
        steps.extend(order.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    steps
}

/// Outcome of checking a batch schedule against a stage-placed manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOrderAudit {
    /// Every injected line lies in the plan's section.
    pub confined: bool,
    /// Within each epoch, no batch draws from an earlier section than a
    /// previous batch did.
    pub sections_in_order: bool,
    /// Each section is internally shuffled: injected lines are interleaved
    /// with clean lines rather than stored as one block.
    pub shuffled_within_sections: bool,
}

impl StageOrderAudit {
    pub fn passed(&self) -> bool {
        self.confined && self.sections_in_order && self.shuffled_within_sections
    }
}

pub fn audit_stage_order(schedule: &[Vec<usize>], manifest: &ContaminationManifest) -> Result<StageOrderAudit> {
    let (Placement::Stage(stage), Some(bounds)) = (&manifest.plan.placement, manifest.sections) else {
        return Err(Error::Invalid("manifest does not use stage placement".into()));
    };
    let section_of = |line: usize| bounds.iter().position(|&(s, e)| line >= s && line < e);
    let (lo, hi) = bounds[stage.index()];
    let confined = manifest.injected.iter().all(|r| r.line >= lo && r.line < hi && r.section == Some(*stage));

    let mut sections_in_order = true;
    let mut current = 0usize;
    let mut seen_lines = 0usize;
    for batch in schedule {
        for &line in batch {
            let Some(s) = section_of(line) else {
                sections_in_order = false;
                continue;
            };
            if seen_lines.is_multiple_of(manifest.total_lines) {
                current = 0;
            }
            if s < current {
                sections_in_order = false;
            }
            current = current.max(s);
            seen_lines += 1;
        }
    }

    let mut lines: Vec<usize> = manifest.injected.iter().map(|r| r.line).collect();
    lines.sort_unstable();
    let block = lines.len() > 1 && lines.last().expect("nonempty") - lines[0] + 1 == lines.len();
    let interleaved_clean = hi - lo > lines.len();
    let shuffled_within_sections = lines.is_empty() || !block || !interleaved_clean;
    Ok(StageOrderAudit { confined, sections_in_order, shuffled_within_sections })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn trace_digest(log: &[StepRecord]) -> String {
    let mut h = Sha256::new();
    for r in log {
        h.update(r.step.to_le_bytes());
        h.update(r.loss.to_bits().to_le_bytes());
        h.update(r.lr.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn write_training_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<StepRecord>,
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    model: &'a ModelConfig,
    pretrain: &'a PretrainConfig,
    manifest_digest: &'a str,
    corpus_lines: usize,
    vocab_digest: String,
    parent: Option<&'a str>,
}

/// Pretrains a freshly initialized encoder on `lines`.
pub fn pretrain(
    lines: &[String],
    manifest: Option<&ContaminationManifest>,
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if model.vocab_size != vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model vocab_size {} but vocabulary has {} tokens",
            model.vocab_size,
            vocab.len()
        )));
    }
    cfg.validate()?;
    let params = ModelParams::init(model, cfg.seed)?;
    run_stage(params, lines, manifest, vocab, cfg, None)
}

/// Continues MLM training of `checkpoint` on a new corpus with a fresh
/// optimizer. The vocabulary must be the one the checkpoint was trained with.
pub fn continue_pretrain(
    checkpoint: &ModelCheckpoint,
    lines: &[String],
    manifest: Option<&ContaminationManifest>,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if checkpoint.meta.vocab != vocab.tokens() {
        return Err(Error::VocabMismatch(format!(
            "checkpoint vocabulary ({} tokens) differs from corpus vocabulary ({} tokens)",
            checkpoint.meta.vocab.len(),
            vocab.len()
        )));
    }
    cfg.validate()?;
    let mut params = checkpoint.params.clone();
    params.drop_classifier();
    run_stage(params, lines, manifest, vocab, cfg, Some(&checkpoint.meta))
}

fn run_stage(
    mut params: ModelParams<f32>,
    lines: &[String],
    manifest: Option<&ContaminationManifest>,
    vocab: &Vocab,
    cfg: &PretrainConfig,
    parent: Option<&TrainingMeta>,
) -> Result<PretrainOutcome> {
    let model = params.config().clone();
    let corpus = encode_corpus(lines, manifest, vocab, model.max_seq_len)?;
    let placement = manifest.map(|m| m.plan.placement).unwrap_or(Placement::Shuffled);
    let schedule = batch_schedule(corpus.len(), cfg.batch_size, cfg.epochs, &placement, cfg.seed);
    let total = schedule.len();
    let masking = cfg.masking();
    let adamw = cfg.adamw();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MASK_STREAM);
    let mut state = OptimizerState::new(params.tensors());
    let mut log = Vec::with_capacity(total);

    for (step, batch) in schedule.iter().enumerate() {
        let lr = lr_at(step, total, cfg.peak_lr, &cfg.lr_policy)?;
        let seqs: Vec<Vec<u32>> = batch.iter().map(|&i| corpus.seqs[i].clone()).collect();
        let labels: Vec<Option<usize>> = batch.iter().map(|&i| corpus.label_positions[i]).collect();
        let masked = mask_batch(&seqs, &labels, &masking, model.vocab_size, &mut mask_rng)?;
        let loss = train_step(&mut params, &mut state, &masked, lr, cfg, &adamw, step)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        log.push(StepRecord { step, loss, lr });
        if (step + 1) % 500 == 0 {
            log::info!("step {}/{} loss {:.4} lr {:.3e}", step + 1, total, loss, lr);
        }
    }

    let manifest_digest = manifest.map_or_else(|| UNCONTAMINATED.to_string(), |m| m.digest());
    let identity = RunIdentity {
        model: &model,
        pretrain: cfg,
        manifest_digest: &manifest_digest,
        corpus_lines: lines.len(),
        vocab_digest: vocab_digest(vocab),
        parent: parent.map(|p| p.fingerprint.as_str()),
    };
    let fp = fingerprint(&identity);
    let mut chain = parent.map(|p| p.fingerprint_chain.clone()).unwrap_or_default();
    chain.push(fp.clone());
    let meta = TrainingMeta {
        fingerprint: fp,
        fingerprint_chain: chain,
        steps: parent.map_or(0, |p| p.steps) + total,
        manifest_digest,
        trace_digest: trace_digest(&log),
        pretrain: Some(cfg.clone()),
        vocab: vocab.tokens().to_vec(),
    };
    let checkpoint = ModelCheckpoint { params, optimizer: Some(state), meta };
    Ok(PretrainOutcome { checkpoint, log })
}

/// Forward, backward and update on one masked batch. Returns the loss; a
/// batch without selected positions leaves the parameters untouched.
fn train_step(
    params: &mut ModelParams<f32>,
    state: &mut OptimizerState<f32>,
    masked: &MaskedBatch,
    lr: f64,
    cfg: &PretrainConfig,
    adamw: &AdamWConfig,
    step: usize,
) -> Result<f64> {
    let batch = TokenBatch::from_sequences(&masked.inputs);
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (b, row) in masked.targets.iter().enumerate() {
        for (p, &t) in row.iter().enumerate() {
            if t != IGNORE_INDEX {
                positions.push(b * batch.seq + p);
                targets.push(t);
            }
        }
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::with_seed(cfg.seed ^ DROPOUT_STREAM ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let bound = params.bind(&mut tape, true);
    let forward = |tape: &mut Tape<f32>| -> Result<_> {
        let hidden = bound.encode(tape, &batch, true)?;
        let logits = bound.mlm_logits_at(tape, hidden, &positions)?;
        tape.cross_entropy(logits, &targets, IGNORE_INDEX)
    };
    let loss_var = forward(&mut tape).map_err(|e| e.at_step(step))?;
    let loss = f64::from(tape.value(loss_var).item());
    let mut grads_store = tape.backward(loss_var).map_err(|e| e.at_step(step))?;
    let mut grads: Vec<Tensor<f32>> = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads_store.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    adamw_step(params.tensors_mut(), &grads, state, lr, adamw).map_err(|e| e.at_step(step))?;
    Ok(loss)
}
