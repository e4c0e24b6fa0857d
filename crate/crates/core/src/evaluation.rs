//! Mem (cloze probe before fine-tuning) and Expl (task accuracy after
//! fine-tuning), each as a seen-minus-unseen gap in percentage points.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contamination::{split_seen_unseen, LabelFormat, UNCONTAMINATED};
use crate::error::{Error, Result};
use crate::model::{ModelParams, TokenBatch};
use crate::tensor::{Tape, Tensor, IGNORE_INDEX};
use crate::textdata::{encode_instance, frame_ids, LabeledExample, TaskSpec, Vocab, MASK_ID};
use crate::training::{adamw_step, clip_global_norm, lr_at, AdamWConfig, LrPolicy, ModelCheckpoint, OptimizerState};

const EVAL_BATCH: usize = 64;
const DROPOUT_STREAM: u64 = 0x4654_4452_4f50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Seen,
    Unseen,
}

/// One scored test instance. For the probe `gold`/`pred` are vocabulary ids,
/// for the task they are class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: usize,
    pub side: Side,
    pub gold: usize,
    pub pred: usize,
    pub correct: bool,
}

/// Fraction of correct records on `side`.
pub fn side_accuracy(records: &[InstanceRecord], side: Side) -> Result<f64> {
    let (n, k) = records
        .iter()
        .filter(|r| r.side == side)
        .fold((0usize, 0usize), |(n, k), r| (n + 1, k + usize::from(r.correct)));
    if n == 0 {
        return Err(Error::Empty(match side {
            Side::Seen => "seen side",
            Side::Unseen => "unseen side",
        }));
    }
    Ok(k as f64 / n as f64)
}

/// Seen-minus-unseen gap in percentage points.
pub fn gap_points(acc_seen: f64, acc_unseen: f64) -> f64 {
    100.0 * (acc_seen - acc_unseen)
}

pub fn write_records(path: &Path, records: &[InstanceRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<InstanceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Index into `candidates` of the highest logit; ties go to the lowest token id.
pub fn candidate_argmax(logits: &[f32], candidates: &[u32]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &id) in candidates.iter().enumerate() {
        let v = *logits
            .get(id as usize)
            .ok_or_else(|| Error::Invalid(format!("candidate id {id} beyond {} logits", logits.len())))?;
        best = match best {
            None => Some(i),
            Some(b) => {
                let bv = logits[candidates[b] as usize];
                if v > bv || (v == bv && id < candidates[b]) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or(Error::Empty("candidate set"))
}

/// Index of the highest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Option<usize> {
    values.iter().enumerate().fold(None, |best, (i, &v)| match best {
        Some((_, bv)) if v <= bv => best,
        _ => Some((i, v)),
    })
    .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub mem: f64,
    pub records: Vec<InstanceRecord>,
}

/// Cloze input: the labeled line with its verbalizer replaced by `[MASK]`.
/// Returns the framed ids and the mask position.
pub fn cloze_ids(vocab: &Vocab, text: &str, format: LabelFormat, max_seq_len: usize) -> (Vec<u32>, usize) {
    let mut ids = vocab.ids(text);
    ids.truncate(max_seq_len.saturating_sub(3));
    let pos = format.label_offset(ids.len());
    ids.insert(pos, MASK_ID);
    let framed = frame_ids(&ids, max_seq_len);
    (framed, pos + 1)
}

/// Reads MLM logits at the label position of every test instance, restricted
/// to the task's verbalizers.
pub fn mem_probe(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    task: &TaskSpec,
    seen: &[LabeledExample],
    unseen: &[LabeledExample],
    format: LabelFormat,
) -> Result<ProbeResult> {
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::Empty("probe side"));
    }
    let candidates = task.verbalizer_ids(vocab)?;
    let max = params.config().max_seq_len;
    let tagged: Vec<(Side, &LabeledExample)> = seen
        .iter()
        .map(|e| (Side::Seen, e))
        .chain(unseen.iter().map(|e| (Side::Unseen, e)))
        .collect();
    let mut records = Vec::with_capacity(tagged.len());
    for chunk in tagged.chunks(EVAL_BATCH) {
        let (seqs, mask_pos): (Vec<Vec<u32>>, Vec<usize>) =
            chunk.iter().map(|(_, e)| cloze_ids(vocab, &e.text, format, max)).unzip();
        let batch = TokenBatch::trimmed(&seqs);
        let flat: Vec<usize> = mask_pos.iter().enumerate().map(|(b, &p)| b * batch.seq + p).collect();
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        let hidden = bound.encode(&mut tape, &batch, false)?;
        let logits = bound.mlm_logits_at(&mut tape, hidden, &flat)?;
        let logits = tape.value(logits);
        let v = logits.shape()[1];
        for (row, (side, ex)) in chunk.iter().enumerate() {
            let gold = vocab.single_token_id(&ex.verbalizer)?;
            let pick = candidate_argmax(&logits.data()[row * v..(row + 1) * v], &candidates)?;
            let pred = candidates[pick];
            records.push(InstanceRecord {
                instance_id: ex.id,
                side: *side,
                gold: gold as usize,
                pred: pred as usize,
                correct: pred == gold,
            });
        }
    }
    let acc_seen = side_accuracy(&records, Side::Seen)?;
    let acc_unseen = side_accuracy(&records, Side::Unseen)?;
    Ok(ProbeResult { acc_seen, acc_unseen, mem: gap_points(acc_seen, acc_unseen), records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_policy: LrPolicy,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Number of leading training examples used; `None` uses all.
    pub train_subset_size: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            batch_size: 8,
            lr: 2e-5,
            lr_policy: LrPolicy::LinearWarmupDecay { warmup_fraction: 0.0 },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            seed: 0,
            train_subset_size: Some(1000),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tune epochs and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("fine-tune lr {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ModelParams<f32>,
    pub final_train_loss: f64,
    pub seed: u64,
}

/// Fine-tunes a copy of `checkpoint` with a fresh classification head.
pub fn finetune(checkpoint: &ModelCheckpoint, task: &TaskSpec, vocab: &Vocab, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let n = cfg.train_subset_size.unwrap_or(task.train.len());
    if n > task.train.len() {
        return Err(Error::Config(format!(
            "train_subset_size {n} exceeds {} training examples",
            task.train.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("fine-tuning set"));
    }
    let max = checkpoint.config().max_seq_len;
    let data: Vec<(Vec<u32>, i64)> =
        task.train[..n].iter().map(|e| (encode_instance(vocab, &e.text, max), e.label as i64)).collect();

    let mut params = checkpoint.params.clone();
    params.init_classifier(task.num_classes, cfg.seed)?;
    let adamw = AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay };
    let mut state = OptimizerState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<i64> = chunk.iter().map(|&i| data[i].1).collect();
            let batch = TokenBatch::trimmed(&seqs);
            let mut tape = Tape::with_seed(cfg.seed ^ DROPOUT_STREAM ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let bound = params.bind(&mut tape, true);
            let loss = (|| {
                let hidden = bound.encode(&mut tape, &batch, true)?;
                let logits = bound.cls_logits(&mut tape, hidden, task.num_classes)?;
                tape.cross_entropy(logits, &labels, IGNORE_INDEX)
            })()
            .map_err(|e| e.at_step(step))?;
            last_loss = f64::from(tape.value(loss).item());
            if !last_loss.is_finite() {
                return Err(Error::Divergence { step, loss: last_loss });
            }
            let mut store = tape.backward(loss).map_err(|e| e.at_step(step))?;
            let mut grads: Vec<Tensor<f32>> = bound
                .vars()
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| store.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let lr = lr_at(step, total, cfg.lr, &cfg.lr_policy)?;
            adamw_step(params.tensors_mut(), &grads, &mut state, lr, &adamw).map_err(|e| e.at_step(step))?;
            step += 1;
        }
    }
    Ok(FinetuneOutcome { params, final_train_loss: last_loss, seed: cfg.seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub accuracy: f64,
    pub records: Vec<InstanceRecord>,
}

/// Class logits for `texts`, `[n, classes]` row-major.
pub fn class_logits(params: &ModelParams<f32>, vocab: &Vocab, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
    let classes = params.num_classes().ok_or_else(|| Error::Config("classification head not initialized".into()))?;
    let max = params.config().max_seq_len;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EVAL_BATCH) {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|t| encode_instance(vocab, t, max)).collect();
        let batch = TokenBatch::trimmed(&seqs);
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        let hidden = bound.encode(&mut tape, &batch, false)?;
        let logits = bound.cls_logits(&mut tape, hidden, classes)?;
        out.extend(tape.value(logits).data().chunks(classes).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Accuracy of the classification head on `examples`; ties go to the lowest class id.
pub fn task_eval(params: &ModelParams<f32>, vocab: &Vocab, examples: &[LabeledExample], side: Side) -> Result<TaskEval> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let logits = class_logits(params, vocab, &texts)?;
    let records: Vec<InstanceRecord> = examples
        .iter()
        .zip(&logits)
        .map(|(e, l)| {
            let pred = argmax(l).expect("at least two classes");
            InstanceRecord { instance_id: e.id, side, gold: e.label, pred, correct: pred == e.label }
        })
        .collect();
    let accuracy = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
    Ok(TaskEval { accuracy, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub expl: f64,
    pub seed: u64,
    pub final_train_loss: f64,
    pub records: Vec<InstanceRecord>,
}

pub fn expl_score(
    outcome: &FinetuneOutcome,
    vocab: &Vocab,
    seen: &[LabeledExample],
    unseen: &[LabeledExample],
) -> Result<FinetuneResult> {
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::Empty("evaluation side"));
    }
    let s = task_eval(&outcome.params, vocab, seen, Side::Seen)?;
    let u = task_eval(&outcome.params, vocab, unseen, Side::Unseen)?;
    let mut records = s.records;
    records.extend(u.records);
    Ok(FinetuneResult {
        acc_seen: s.accuracy,
        acc_unseen: u.accuracy,
        expl: gap_points(s.accuracy, u.accuracy),
        seed: outcome.seed,
        final_train_loss: outcome.final_train_loss,
        records,
    })
}

/// Mean, sample standard deviation and standard error of the mean. The
/// spread is absent for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    pub sem: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Empty("summary values"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Ok(Summary { n, mean, sd, sem: sd.map(|s| s / (n as f64).sqrt()) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub seed: u64,
    pub manifest_digest: String,
    pub probe: ProbeResult,
    pub finetune: FinetuneResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub mem: Summary,
    pub expl: Summary,
    pub runs: Vec<BaselineRun>,
}

/// Mem and Expl of an uncontaminated checkpoint over `seeds`. Nothing was
/// injected, so each seed draws its own seen/unseen split as well as its
/// fine-tuning seed.
pub fn baseline_run(
    checkpoint: &ModelCheckpoint,
    task: &TaskSpec,
    vocab: &Vocab,
    seen_fraction: f64,
    format: LabelFormat,
    finetune_cfg: &FinetuneConfig,
    seeds: &[u64],
) -> Result<BaselineResult> {
    if checkpoint.meta.manifest_digest != UNCONTAMINATED {
        return Err(Error::Invalid("baseline requires a checkpoint pretrained without contamination".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (seen, unseen) = split_seen_unseen(task, seen_fraction, seed)?;
        let probe = mem_probe(&checkpoint.params, vocab, task, &seen, &unseen, format)?;
        let cfg = FinetuneConfig { seed, ..finetune_cfg.clone() };
        let outcome = finetune(checkpoint, task, vocab, &cfg)?;
        let finetune = expl_score(&outcome, vocab, &seen, &unseen)?;
        runs.push(BaselineRun { seed, manifest_digest: UNCONTAMINATED.to_string(), probe, finetune });
    }
    let mem = Summary::of(&runs.iter().map(|r| r.probe.mem).collect::<Vec<_>>())?;
    let expl = Summary::of(&runs.iter().map(|r| r.finetune.expl).collect::<Vec<_>>())?;
    Ok(BaselineResult { mem, expl, runs })
}
