//! BERT-style encoder with a masked-LM head and a lazily created
//! classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::textdata::PAD_ID;

/// Additive attention bias for padded keys.
const MASKED_SCORE: f64 = -10_000.0;
const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_mlm_to_embeddings: bool,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads, sequences of 32.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_seq_len: 32,
            tie_mlm_to_embeddings: true,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    /// One layer, width 32.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig { num_layers: 1, hidden_dim: 32, num_heads: 2, ffn_dim: 128, ..Self::toy(vocab_size) }
    }

    /// Four layers, width 128.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig { num_layers: 4, hidden_dim: 128, num_heads: 4, ffn_dim: 512, ..Self::toy(vocab_size) }
    }

    /// BERT-base geometry with 128-token sequences.
    pub fn bert_base(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            max_seq_len: 128,
            ..Self::toy(vocab_size)
        }
    }

    /// BERT-large geometry with 128-token sequences.
    pub fn bert_large(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 24,
            hidden_dim: 1024,
            num_heads: 16,
            ffn_dim: 4096,
            max_seq_len: 128,
            ..Self::toy(vocab_size)
        }
    }

    /// Named size presets used by the model-size sweep.
    pub fn by_name(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "toy" => Ok(Self::toy(vocab_size)),
            "small" => Ok(Self::small(vocab_size)),
            "paper-base" => Ok(Self::bert_base(vocab_size)),
            "paper-large" => Ok(Self::bert_large(vocab_size)),
            other => Err(Error::Config(format!("unknown model size {other:?}"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("layer count and widths must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_seq_len < 3 {
            return fail(format!("max_seq_len {} < 3", self.max_seq_len));
        }
        if self.vocab_size <= PAD_ID as usize + 5 {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Number of pretrained parameters (classifier excluded).
    pub fn param_count(&self) -> usize {
        let (h, f, v, s, l) =
            (self.hidden_dim, self.ffn_dim, self.vocab_size, self.max_seq_len, self.num_layers);
        let embeddings = v * h + s * h + 2 * h;
        let layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
        let head = (h * h + h) + 2 * h + v + if self.tie_mlm_to_embeddings { 0 } else { h * v };
        embeddings + l * layer + head
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden_dim, self.ffn_dim);
        let mut out = vec![
            ("embeddings.word".to_string(), vec![self.vocab_size, h]),
            ("embeddings.position".to_string(), vec![self.max_seq_len, h]),
            ("embeddings.norm.gain".to_string(), vec![h]),
            ("embeddings.norm.bias".to_string(), vec![h]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            out.extend([
                (p("attn.query.weight"), vec![h, h]),
                (p("attn.query.bias"), vec![h]),
                (p("attn.key.weight"), vec![h, h]),
                (p("attn.key.bias"), vec![h]),
                (p("attn.value.weight"), vec![h, h]),
                (p("attn.value.bias"), vec![h]),
                (p("attn.output.weight"), vec![h, h]),
                (p("attn.output.bias"), vec![h]),
                (p("attn.norm.gain"), vec![h]),
                (p("attn.norm.bias"), vec![h]),
                (p("ffn.in.weight"), vec![h, f]),
                (p("ffn.in.bias"), vec![f]),
                (p("ffn.out.weight"), vec![f, h]),
                (p("ffn.out.bias"), vec![h]),
                (p("ffn.norm.gain"), vec![h]),
                (p("ffn.norm.bias"), vec![h]),
            ]);
        }
        out.extend([
            ("mlm.transform.weight".to_string(), vec![h, h]),
            ("mlm.transform.bias".to_string(), vec![h]),
            ("mlm.norm.gain".to_string(), vec![h]),
            ("mlm.norm.bias".to_string(), vec![h]),
            ("mlm.decoder.bias".to_string(), vec![self.vocab_size]),
        ]);
        if !self.tie_mlm_to_embeddings {
            out.push(("mlm.decoder.weight".to_string(), vec![h, self.vocab_size]));
        }
        out
    }

    fn mlm_base(&self) -> usize {
        4 + PER_LAYER * self.num_layers
    }

    fn classifier_base(&self) -> usize {
        self.mlm_base() + 5 + usize::from(!self.tie_mlm_to_embeddings)
    }
}

/// Ids of a padded batch, `[batch, seq]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// Stacks sequences, padding to the longest one.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Self::padded_to(seqs, seq)
    }

    /// Stacks sequences and trims trailing columns that are padding in every row.
    pub fn trimmed(seqs: &[Vec<u32>]) -> Self {
        let seq = seqs
            .iter()
            .map(|s| s.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1))
            .max()
            .unwrap_or(0);
        Self::padded_to(seqs, seq)
    }

    fn padded_to(seqs: &[Vec<u32>], seq: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let take = s.len().min(seq);
            ids.extend_from_slice(&s[..take]);
            ids.extend(std::iter::repeat_n(PAD_ID, seq - take));
        }
        TokenBatch { ids, batch: seqs.len(), seq }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Named parameter tensors of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    num_classes: Option<usize>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let z = normal.sample(rng);
        if z.abs() <= 2.0 * INIT_STD {
            return z;
        }
    }
}

fn init_tensor<T: Real>(name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    if name.ends_with(".gain") {
        Tensor::full(shape, T::one())
    } else if name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(truncated_normal(rng, &normal))).collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }
}

impl<T: Real> ModelParams<T> {
    /// Truncated-normal weights (std 0.02, cut at two deviations), zero
    /// biases, unit layer-norm gains. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = config
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, shape, &mut rng);
                (name, t)
            })
            .unzip();
        Ok(ModelParams { config: config.clone(), names, tensors, num_classes: None })
    }

    /// Reassembles parameters from named tensors, checking every shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.shapes();
        if named.len() != expected.len() && named.len() != expected.len() + 4 {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let (names, tensors): (Vec<String>, Vec<Tensor<T>>) = named.into_iter().unzip();
        for ((name, shape), (got_name, got)) in expected.iter().zip(names.iter().zip(&tensors)) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name:?} {:?} where {name:?} {shape:?} expected",
                    got.shape()
                )));
            }
        }
        let mut params = ModelParams { config, names, tensors, num_classes: None };
        if params.tensors.len() > expected.len() {
            let base = params.config.classifier_base();
            let classes = params.tensors[base + 2].shape()[1];
            params.num_classes = Some(classes);
            params.check_classifier_shapes()?;
        }
        Ok(params)
    }

    fn check_classifier_shapes(&self) -> Result<()> {
        let h = self.config.hidden_dim;
        let c = self.num_classes.unwrap_or(0);
        let base = self.config.classifier_base();
        let want: [&[usize]; 4] = [&[h, h], &[h], &[h, c], &[c]];
        for (i, w) in want.iter().enumerate() {
            if self.tensors[base + i].shape() != *w {
                return Err(Error::Checkpoint(format!("classifier tensor {i} has wrong shape")));
            }
        }
        Ok(())
    }

    /// Creates a fresh classification head (tanh pooler plus linear layer)
    /// from its own seed, replacing any existing head.
    pub fn init_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("{num_classes} classes")));
        }
        self.drop_classifier();
        let h = self.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape) in [
            ("classifier.pool.weight", vec![h, h]),
            ("classifier.pool.bias", vec![h]),
            ("classifier.out.weight", vec![h, num_classes]),
            ("classifier.out.bias", vec![num_classes]),
        ] {
            let t = init_tensor(name, shape, &mut rng);
            self.names.push(name.to_string());
            self.tensors.push(t);
        }
        self.num_classes = Some(num_classes);
        Ok(())
    }

    pub fn drop_classifier(&mut self) {
        let base = self.config.classifier_base();
        self.names.truncate(base);
        self.tensors.truncate(base);
        self.num_classes = None;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Registers every tensor on `tape` (as trainable leaves when `trainable`).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { config: self.config.clone(), vars, num_classes: self.num_classes }
    }
}

/// Parameters registered on a tape; runs the forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    config: ModelConfig,
    vars: Vec<Var>,
    num_classes: Option<usize>,
}

impl Bound {
    /// Binds existing tape handles, ordered as [`ModelParams::tensors`] of `params`.
    pub fn from_vars<T: Real>(params: &ModelParams<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.tensors.len() {
            return Err(Error::Config(format!("expected {} vars, got {}", params.tensors.len(), vars.len())));
        }
        Ok(Bound { config: params.config.clone(), vars: vars.to_vec(), num_classes: params.num_classes })
    }

    /// Tape handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[4 + PER_LAYER * l + k]
    }

    fn linear<T: Real>(&self, tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// Hidden states `[batch, seq, hidden]`. Keys at [`PAD_ID`] positions are
    /// masked out of every attention distribution.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, batch: &TokenBatch, train: bool) -> Result<Var> {
        let cfg = &self.config;
        let (b, s, h) = (batch.batch, batch.seq, cfg.hidden_dim);
        if s > cfg.max_seq_len {
            return Err(Error::shape(
                "encode",
                format!("sequence length {s} exceeds max_seq_len {}", cfg.max_seq_len),
            ));
        }
        if b == 0 || s == 0 {
            return Err(Error::Empty("token batch"));
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
        let words = tape.gather(self.vars[0], &ids, &[b, s])?;
        let positions = tape.slice(self.vars[1], 0, 0, s)?;
        let x = tape.add(words, positions)?;
        let x = tape.layer_norm(x, self.vars[2], self.vars[3], cfg.layer_norm_eps)?;
        let mut x = tape.dropout(x, cfg.dropout_rate, train)?;

        let mut bias = Vec::with_capacity(b * s * s);
        for row in 0..b {
            let keys = batch.row(row);
            for _query in 0..s {
                bias.extend(keys.iter().map(|&k| if k == PAD_ID { T::lit(MASKED_SCORE) } else { T::zero() }));
            }
        }
        let bias = tape.constant(Tensor::from_vec(vec![b, s, s], bias)?);

        let (heads, hd) = (cfg.num_heads, cfg.head_dim());
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        for l in 0..cfg.num_layers {
            let q = self.linear(tape, x, self.layer(l, 0), self.layer(l, 1))?;
            let q = tape.scale(q, scale)?;
            let k = self.linear(tape, x, self.layer(l, 2), self.layer(l, 3))?;
            let v = self.linear(tape, x, self.layer(l, 4), self.layer(l, 5))?;
            let mut contexts = Vec::with_capacity(heads);
            for head in 0..heads {
                let span = (head * hd, (head + 1) * hd);
                let qh = tape.slice(q, 2, span.0, span.1)?;
                let kh = tape.slice(k, 2, span.0, span.1)?;
                let vh = tape.slice(v, 2, span.0, span.1)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.add(scores, bias)?;
                let probs = tape.softmax(scores)?;
                let probs = tape.dropout(probs, cfg.dropout_rate, train)?;
                contexts.push(tape.matmul(probs, vh)?);
            }
            let ctx = if heads == 1 { contexts[0] } else { tape.concat(&contexts, 2)? };
            let attn = self.linear(tape, ctx, self.layer(l, 6), self.layer(l, 7))?;
            let attn = tape.dropout(attn, cfg.dropout_rate, train)?;
            let res = tape.add(x, attn)?;
            x = tape.layer_norm(res, self.layer(l, 8), self.layer(l, 9), cfg.layer_norm_eps)?;

            let f = self.linear(tape, x, self.layer(l, 10), self.layer(l, 11))?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, f, self.layer(l, 12), self.layer(l, 13))?;
            let f = tape.dropout(f, cfg.dropout_rate, train)?;
            let res = tape.add(x, f)?;
            x = tape.layer_norm(res, self.layer(l, 14), self.layer(l, 15), cfg.layer_norm_eps)?;
        }
        debug_assert_eq!(tape.value(x).shape(), [b, s, h]);
        Ok(x)
    }

    /// Vocabulary logits for every position of `hidden` (`[.., hidden] -> [.., vocab]`).
    pub fn mlm_logits<T: Real>(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let base = self.config.mlm_base();
        let t = self.linear(tape, hidden, self.vars[base], self.vars[base + 1])?;
        let t = tape.gelu(t)?;
        let t = tape.layer_norm(t, self.vars[base + 2], self.vars[base + 3], self.config.layer_norm_eps)?;
        let decoder = if self.config.tie_mlm_to_embeddings {
            tape.transpose(self.vars[0])?
        } else {
            self.vars[base + 5]
        };
        let logits = tape.matmul(t, decoder)?;
        tape.add(logits, self.vars[base + 4])
    }

    /// Vocabulary logits `[positions, vocab]` at flat `batch * seq` offsets.
    pub fn mlm_logits_at<T: Real>(&self, tape: &mut Tape<T>, hidden: Var, positions: &[usize]) -> Result<Var> {
        let shape = tape.value(hidden).shape().to_vec();
        let h = *shape.last().unwrap_or(&0);
        let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        let flat = tape.reshape(hidden, &[rows, h])?;
        let picked = tape.gather(flat, positions, &[positions.len()])?;
        self.mlm_logits(tape, picked)
    }

    /// Class logits `[batch, classes]` from the first ([CLS]) position.
    pub fn cls_logits<T: Real>(&self, tape: &mut Tape<T>, hidden: Var, num_classes: usize) -> Result<Var> {
        match self.num_classes {
            None => return Err(Error::Config("classification head not initialized".into())),
            Some(c) if c != num_classes => {
                return Err(Error::Config(format!("head has {c} classes, {num_classes} requested")))
            }
            _ => {}
        }
        let shape = tape.value(hidden).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("cls_logits", format!("hidden {shape:?}")));
        }
        let first = tape.slice(hidden, 1, 0, 1)?;
        let first = tape.reshape(first, &[shape[0], shape[2]])?;
        let base = self.config.classifier_base();
        let pooled = self.linear(tape, first, self.vars[base], self.vars[base + 1])?;
        let pooled = tape.tanh(pooled)?;
        self.linear(tape, pooled, self.vars[base + 2], self.vars[base + 3])
    }
}
