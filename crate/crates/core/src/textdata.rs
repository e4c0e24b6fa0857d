//! Word-level tokenization, vocabularies, TSV ingestion and synthetic data.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
/// First id available to ordinary words.
pub const FIRST_WORD_ID: u32 = RESERVED.len() as u32;

/// Lowercases, splits on whitespace and emits each ASCII punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    freqs: Vec<u64>,
}

/// Token frequencies over `lines`, as produced by [`tokenize`].
pub fn count_tokens<S: AsRef<str>>(lines: &[S]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for line in lines {
        for t in tokenize(line.as_ref()) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

impl Vocab {
    /// Reserved tokens followed by every token with frequency `>= min_freq`,
    /// ordered by descending frequency then ascending token.
    pub fn build<S: AsRef<str>>(lines: &[S], min_freq: u64) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let counts = count_tokens(lines);
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, f)| *f >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::reserved_only();
        for (t, f) in kept {
            vocab.push(t, f);
        }
        Ok(vocab)
    }

    fn reserved_only() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new(), freqs: Vec::new() };
        for r in RESERVED {
            v.push(r.to_string(), 0);
        }
        v
    }

    fn push(&mut self, token: String, freq: u64) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.freqs.push(freq);
        id
    }

    /// Id of `token`, appending it (frequency 0) when absent.
    pub fn ensure(&mut self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) => id,
            None => self.push(token.to_string(), 0),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Training-corpus frequency of `id` (0 for reserved and appended tokens).
    pub fn freq(&self, id: u32) -> u64 {
        self.freqs.get(id as usize).copied().unwrap_or(0)
    }

    /// Ids of `text`'s tokens; unknown tokens map to `[UNK]`.
    pub fn ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK_ID)).collect()
    }

    /// Id of a verbalizer, which must be exactly one known token.
    pub fn single_token_id(&self, verbalizer: &str) -> Result<u32> {
        let toks = tokenize(verbalizer);
        if toks.len() != 1 {
            return Err(Error::Invalid(format!(
                "verbalizer {verbalizer:?} is {} tokens, expected 1",
                toks.len()
            )));
        }
        self.id(&toks[0]).ok_or_else(|| Error::VocabMismatch(format!("verbalizer {verbalizer:?} not in vocabulary")))
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_token_list(text.lines().map(str::to_string).collect(), &path.display().to_string())
    }

    pub fn from_token_list(tokens: Vec<String>, origin: &str) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new(), freqs: Vec::new() };
        for (i, t) in tokens.into_iter().enumerate() {
            if v.index.contains_key(&t) {
                return Err(Error::Parse { path: origin.to_string(), line: i + 1, msg: format!("duplicate token {t:?}") });
            }
            v.push(t, 0);
        }
        Ok(v)
    }
}

/// `[CLS] ids.. [SEP]` padded with `[PAD]` to `max_seq_len`. Keeps the first
/// `max_seq_len - 2` ids when too long, so `[SEP]` always closes the
/// non-pad region.
pub fn frame_ids(ids: &[u32], max_seq_len: usize) -> Vec<u32> {
    let keep = ids.len().min(max_seq_len.saturating_sub(2));
    let mut out = Vec::with_capacity(max_seq_len);
    out.push(CLS_ID);
    out.extend_from_slice(&ids[..keep]);
    out.push(SEP_ID);
    out.resize(max_seq_len, PAD_ID);
    out
}

pub fn encode_instance(vocab: &Vocab, text: &str, max_seq_len: usize) -> Vec<u32> {
    frame_ids(&vocab.ids(text), max_seq_len)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    /// Unique within its task.
    pub id: usize,
    pub text: String,
    pub label: usize,
    pub verbalizer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub verbalizers: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.verbalizers.len() != self.num_classes || self.num_classes < 2 {
            return Err(Error::Invalid(format!(
                "{} verbalizers for {} classes",
                self.verbalizers.len(),
                self.num_classes
            )));
        }
        let distinct: HashSet<_> = self.verbalizers.iter().collect();
        if distinct.len() != self.verbalizers.len() {
            return Err(Error::Invalid("verbalizers are not pairwise distinct".into()));
        }
        for v in &self.verbalizers {
            if tokenize(v).len() != 1 {
                return Err(Error::Invalid(format!("verbalizer {v:?} is not a single token")));
            }
        }
        let mut ids = HashSet::new();
        for ex in self.train.iter().chain(&self.test) {
            if ex.label >= self.num_classes || ex.verbalizer != self.verbalizers[ex.label] {
                return Err(Error::Invalid(format!("example {} has inconsistent label", ex.id)));
            }
            if !ids.insert(ex.id) {
                return Err(Error::Invalid(format!("duplicate example id {}", ex.id)));
            }
        }
        let train_texts: HashSet<&str> = self.train.iter().map(|e| e.text.as_str()).collect();
        if let Some(dup) = self.test.iter().find(|e| train_texts.contains(e.text.as_str())) {
            return Err(Error::Invalid(format!("test example {} also appears in train", dup.id)));
        }
        Ok(())
    }

    /// Builds a task from `(text, label string)` pairs. Classes are the
    /// distinct label strings, ordered numerically when all are integers.
    pub fn from_labeled(name: &str, train: &[(String, String)], test: &[(String, String)]) -> Result<Self> {
        let mut labels: Vec<String> = train
            .iter()
            .chain(test)
            .map(|(_, l)| l.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
            labels.sort_by_key(|l| l.parse::<i64>().unwrap());
        } else {
            labels.sort();
        }
        let class_of: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut next_id = 0;
        let mut mk = |rows: &[(String, String)]| -> Vec<LabeledExample> {
            rows.iter()
                .map(|(text, label)| {
                    let ex = LabeledExample {
                        id: next_id,
                        text: text.clone(),
                        label: class_of[label.as_str()],
                        verbalizer: label.clone(),
                    };
                    next_id += 1;
                    ex
                })
                .collect()
        };
        let task = TaskSpec {
            name: name.to_string(),
            num_classes: labels.len(),
            verbalizers: labels.clone(),
            train: mk(train),
            test: mk(test),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn verbalizer_ids(&self, vocab: &Vocab) -> Result<Vec<u32>> {
        self.verbalizers.iter().map(|v| vocab.single_token_id(v)).collect()
    }

    /// Every text and verbalizer of the task, for vocabulary building.
    pub fn all_lines(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.test)
            .map(|e| e.text.clone())
            .chain(self.verbalizers.iter().cloned())
            .collect()
    }
}

/// Parses `text<TAB>label` lines. Blank trailing lines are ignored.
pub fn read_labeled_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labeled_tsv(&text, &path.display().to_string())
}

pub fn parse_labeled_tsv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.to_string(), line: i + 1, msg };
        let (body, label) = line.rsplit_once('\t').ok_or_else(|| err("missing TAB separator".into()))?;
        let label = label.trim();
        if tokenize(label).len() != 1 {
            return Err(err(format!("label {label:?} is not a single token")));
        }
        rows.push((body.to_string(), label.to_string()));
    }
    Ok(rows)
}

/// Reads a train and a test TSV file into one task.
pub fn ingest_task(name: &str, train: &Path, test: &Path) -> Result<TaskSpec> {
    TaskSpec::from_labeled(name, &read_labeled_tsv(train)?, &read_labeled_tsv(test)?)
}

pub fn write_labeled_tsv(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&e.text);
        out.push('\t');
        out.push_str(&e.verbalizer);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One instance per line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_corpus<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::with_capacity(lines.len() * 64);
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const ONSETS: [&str; 15] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// The `rank`-th synthetic word: two or more consonant-vowel syllables,
/// distinct for every rank.
pub fn synthetic_word(rank: usize) -> String {
    let base = ONSETS.len() * NUCLEI.len();
    let mut n = rank + base;
    let mut syllables = Vec::new();
    while n > 0 {
        let s = n % base;
        syllables.push(format!("{}{}", ONSETS[s / NUCLEI.len()], NUCLEI[s % NUCLEI.len()]));
        n /= base;
    }
    syllables.reverse();
    syllables.concat()
}

/// Parameters of the synthetic clean corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusGen {
    pub num_lines: usize,
    /// Inclusive token-count range of a line.
    pub line_len: (usize, usize),
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    /// Probability that a token is followed by its fixed partner word.
    pub bigram_prob: f64,
}

impl Default for CorpusGen {
    fn default() -> Self {
        CorpusGen { num_lines: 20_000, line_len: (6, 14), vocab_size: 2_000, zipf_exponent: 1.0, bigram_prob: 0.25 }
    }
}

impl CorpusGen {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 50 {
            return Err(Error::Config(format!("vocab_size {} < 50", self.vocab_size)));
        }
        let (lo, hi) = self.line_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("degenerate line length range {lo}..={hi}")));
        }
        if self.num_lines == 0 {
            return Err(Error::Config("num_lines must be positive".into()));
        }
        if !(self.zipf_exponent > 0.0) || !(0.0..1.0).contains(&self.bigram_prob) {
            return Err(Error::Config("zipf_exponent must be > 0 and bigram_prob in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Rank sampler for `p(r) ∝ (r + 1)^-s`.
#[derive(Debug, Clone)]
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(n: usize, exponent: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (0..n)
            .map(|r| {
                acc += ((r + 1) as f64).powf(-exponent);
                acc
            })
            .collect();
        cdf.iter_mut().for_each(|c| *c /= acc);
        Zipf { cdf }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

/// Word sequences with Zipfian unigrams and a fixed partner-word bigram.
struct WordStream<'a> {
    zipf: Zipf,
    words: Vec<String>,
    banned: HashSet<usize>,
    cfg: &'a CorpusGen,
}

impl<'a> WordStream<'a> {
    fn new(cfg: &'a CorpusGen, exclude: &[String]) -> Self {
        let words: Vec<String> = (0..cfg.vocab_size).map(synthetic_word).collect();
        let exclude: HashSet<&str> = exclude.iter().map(String::as_str).collect();
        let banned = words.iter().enumerate().filter(|(_, w)| exclude.contains(w.as_str())).map(|(i, _)| i).collect();
        WordStream { zipf: Zipf::new(cfg.vocab_size, cfg.zipf_exponent), words, banned, cfg }
    }

    fn draw<R: Rng>(&self, rng: &mut R, prev: Option<usize>, avoid: &HashSet<usize>) -> usize {
        if let Some(p) = prev {
            let partner = (p ^ 1).min(self.cfg.vocab_size - 1);
            if rng.random::<f64>() < self.cfg.bigram_prob && !self.banned.contains(&partner) && !avoid.contains(&partner) {
                return partner;
            }
        }
        loop {
            let r = self.zipf.sample(rng);
            if !self.banned.contains(&r) && !avoid.contains(&r) {
                return r;
            }
        }
    }

    fn line<R: Rng>(&self, rng: &mut R, len: usize, avoid: &HashSet<usize>) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let w = self.draw(rng, out.last().copied(), avoid);
            out.push(w);
        }
        out
    }
}

/// Synthetic clean corpus. Tokens in `exclude` never appear.
pub fn gen_clean_corpus(cfg: &CorpusGen, seed: u64, exclude: &[String]) -> Result<Vec<String>> {
    cfg.validate()?;
    let stream = WordStream::new(cfg, exclude);
    if stream.banned.len() == cfg.vocab_size {
        return Err(Error::Config("every word is excluded".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = HashSet::new();
    Ok((0..cfg.num_lines)
        .map(|_| {
            let len = rng.random_range(cfg.line_len.0..=cfg.line_len.1);
            let ranks = stream.line(&mut rng, len, &none);
            ranks.iter().map(|&r| stream.words[r].as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect())
}

/// Parameters of a synthetic classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGen {
    pub num_classes: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Probability that an example carries cue words of its class.
    pub signal_strength: f64,
    /// Inclusive filler-word count range.
    pub text_len: (usize, usize),
    pub cues_per_class: usize,
    pub cues_per_example: usize,
    /// Rank of the first cue word in the shared word list.
    pub cue_rank_offset: usize,
}

impl Default for TaskGen {
    fn default() -> Self {
        TaskGen {
            num_classes: 5,
            num_train: 1_000,
            num_test: 500,
            signal_strength: 0.5,
            text_len: (8, 12),
            cues_per_class: 3,
            cues_per_example: 2,
            cue_rank_offset: 100,
        }
    }
}

impl TaskGen {
    /// Cue words of `class`.
    pub fn cue_words(&self, class: usize) -> Vec<String> {
        let start = self.cue_rank_offset + class * self.cues_per_class;
        (start..start + self.cues_per_class).map(synthetic_word).collect()
    }

    fn validate(&self, corpus: &CorpusGen) -> Result<()> {
        if !(2..=10).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes {} outside 2..=10", self.num_classes)));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength <= 1.0) {
            return Err(Error::Config(format!("signal_strength {} outside (0, 1]", self.signal_strength)));
        }
        if self.num_train == 0 || self.num_test == 0 || self.cues_per_class == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        let (lo, hi) = self.text_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("degenerate text length range {lo}..={hi}")));
        }
        if self.cue_rank_offset + self.num_classes * self.cues_per_class >= corpus.vocab_size {
            return Err(Error::Config("cue words do not fit in the word list".into()));
        }
        Ok(())
    }
}

/// Synthetic task over the same word list as [`gen_clean_corpus`].
///
/// Labels are balanced; verbalizers are the digits `"0".."k-1"`. With
/// probability `signal_strength` an example contains cue words of its
/// class, otherwise only filler (which never includes any cue word).
pub fn gen_task(name: &str, cfg: &TaskGen, corpus: &CorpusGen, seed: u64) -> Result<TaskSpec> {
    cfg.validate(corpus)?;
    let stream = WordStream::new(corpus, &[]);
    let cue_ranks: Vec<Vec<usize>> = (0..cfg.num_classes)
        .map(|c| {
            let start = cfg.cue_rank_offset + c * cfg.cues_per_class;
            (start..start + cfg.cues_per_class).collect()
        })
        .collect();
    let avoid: HashSet<usize> = cue_ranks.iter().flatten().copied().collect();
    let verbalizers: Vec<String> = (0..cfg.num_classes).map(|c| c.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();

    let mut make = |count: usize, first_id: usize, rng: &mut ChaCha8Rng| -> Result<Vec<LabeledExample>> {
        let mut labels: Vec<usize> = (0..count).map(|i| i % cfg.num_classes).collect();
        labels.shuffle(rng);
        let mut out = Vec::with_capacity(count);
        for (i, label) in labels.into_iter().enumerate() {
            let mut attempts = 0;
            let text = loop {
                let len = rng.random_range(cfg.text_len.0..=cfg.text_len.1);
                let mut ranks = stream.line(rng, len, &avoid);
                if rng.random::<f64>() < cfg.signal_strength {
                    for _ in 0..cfg.cues_per_example {
                        let cue = cue_ranks[label][rng.random_range(0..cfg.cues_per_class)];
                        let at = rng.random_range(0..=ranks.len());
                        ranks.insert(at, cue);
                    }
                }
                let text = ranks.iter().map(|&r| stream.words[r].as_str()).collect::<Vec<_>>().join(" ");
                if seen.insert(text.clone()) {
                    break text;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::Config("cannot generate enough distinct examples".into()));
                }
            };
            out.push(LabeledExample { id: first_id + i, text, label, verbalizer: verbalizers[label].clone() });
        }
        Ok(out)
    };
    let train = make(cfg.num_train, 0, &mut rng)?;
    let test = make(cfg.num_test, cfg.num_train, &mut rng)?;
    let task = TaskSpec { name: name.to_string(), num_classes: cfg.num_classes, verbalizers, train, test };
    task.validate()?;
    Ok(task)
}
