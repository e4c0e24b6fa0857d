//! Building contaminated pretraining corpora and auditing them.
//!
//! A task's test set is split into a *seen* half, injected into the
//! pretraining corpus with its gold labels (together with the labeled train
//! set), and an *unseen* half that never appears. Every injected line is
//! recorded in a [`ContaminationManifest`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textdata::{tokenize, LabeledExample, TaskSpec};

/// Digest reported for corpora without injected lines.
pub const UNCONTAMINATED: &str = "uncontaminated";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    First,
    Middle,
    Last,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::First, Stage::Middle, Stage::Last];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::First => "first",
            Stage::Middle => "middle",
            Stage::Last => "last",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "stage")]
pub enum Placement {
    /// Uniform random interleave of clean and labeled lines.
    Shuffled,
    /// All labeled lines confined to one third of the corpus; each third is
    /// shuffled on its own.
    Stage(Stage),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelFormat {
    /// `"<text> <verbalizer>"`
    #[default]
    TextThenLabel,
    /// `"<verbalizer> <text>"`
    LabelThenText,
}

impl LabelFormat {
    /// Token offset of the verbalizer within a labeled line whose text has
    /// `text_tokens` tokens.
    pub fn label_offset(self, text_tokens: usize) -> usize {
        match self {
            LabelFormat::TextThenLabel => text_tokens,
            LabelFormat::LabelThenText => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContaminationPlan {
    pub copies: usize,
    pub seen_fraction: f64,
    pub placement: Placement,
    pub label_format: LabelFormat,
    pub include_train_labels: bool,
}

impl Default for ContaminationPlan {
    fn default() -> Self {
        ContaminationPlan {
            copies: 100,
            seen_fraction: 0.5,
            placement: Placement::Shuffled,
            label_format: LabelFormat::TextThenLabel,
            include_train_labels: true,
        }
    }
}

impl ContaminationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return Err(Error::Config(format!("seen_fraction {} outside (0, 1)", self.seen_fraction)));
        }
        Ok(())
    }
}

/// One injected corpus line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedLine {
    pub example_id: usize,
    pub copy: usize,
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationManifest {
    pub task: String,
    pub plan: ContaminationPlan,
    pub seed: u64,
    pub clean_line_count: usize,
    pub total_lines: usize,
    /// Sha-256 over the sorted clean lines.
    pub clean_digest: String,
    pub seen_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
    /// Formatted labeled line of every injected example.
    pub labeled_lines: BTreeMap<usize, String>,
    /// Half-open line ranges of the three sections (stage placement only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sections: Option<[(usize, usize); 3]>,
    pub injected: Vec<InjectedLine>,
}

impl ContaminationManifest {
    /// Content digest, or [`UNCONTAMINATED`] when nothing was injected.
    pub fn digest(&self) -> String {
        if self.injected.is_empty() {
            return UNCONTAMINATED.to_string();
        }
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Corpus line index -> example id of every injected line.
    pub fn injected_by_line(&self) -> HashMap<usize, usize> {
        self.injected.iter().map(|r| (r.line, r.example_id)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Random partition of the test set into `(seen, unseen)`, each in id order.
/// The split is stratified: every class contributes `round(seen_fraction ×
/// class size)` examples to the seen side, so label frequencies match on
/// both sides up to rounding.
pub fn split_seen_unseen(
    task: &TaskSpec,
    seen_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let n = task.test.len();
    if n == 0 {
        return Err(Error::Empty("test set"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut class_size: HashMap<usize, usize> = HashMap::new();
    for e in &task.test {
        *class_size.entry(e.label).or_insert(0) += 1;
    }
    let mut taken: HashMap<usize, usize> = HashMap::new();
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for i in order {
        let e = &task.test[i];
        let quota = (seen_fraction * class_size[&e.label] as f64).round() as usize;
        let t = taken.entry(e.label).or_insert(0);
        if *t < quota {
            *t += 1;
            seen.push(e.clone());
        } else {
            unseen.push(e.clone());
        }
    }
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::Config(format!(
            "seen_fraction {seen_fraction} of {n} test examples leaves one side empty"
        )));
    }
    seen.sort_by_key(|e| e.id);
    unseen.sort_by_key(|e| e.id);
    Ok((seen, unseen))
}

/// Renders a labeled instance as a corpus line.
pub fn format_labeled_line(example: &LabeledExample, format: LabelFormat) -> Result<String> {
    if tokenize(&example.verbalizer).len() != 1 {
        return Err(Error::Invalid(format!("verbalizer {:?} is not a single token", example.verbalizer)));
    }
    let text = example.text.trim();
    if text.is_empty() {
        log::warn!("example {} has empty text; line is the bare verbalizer", example.id);
        return Ok(example.verbalizer.clone());
    }
    Ok(match format {
        LabelFormat::TextThenLabel => format!("{text} {}", example.verbalizer),
        LabelFormat::LabelThenText => format!("{} {text}", example.verbalizer),
    })
}

fn sorted_digest<'a>(lines: impl Iterator<Item = &'a str>) -> String {
    let mut sorted: Vec<&str> = lines.collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for l in sorted {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Sizes of three consecutive sections covering `n` lines; earlier sections
/// take the remainder.
pub fn section_bounds(n: usize) -> [(usize, usize); 3] {
    let (q, r) = (n / 3, n % 3);
    let sizes = [q + usize::from(r > 0), q + usize::from(r > 1), q];
    let mut start = 0;
    sizes.map(|s| {
        let span = (start, start + s);
        start += s;
        span
    })
}

/// Mixes `copies` duplicates of the labeled train set (when the plan says
/// so) and of the seen test half into `clean_lines`.
pub fn inject(
    clean_lines: &[String],
    task: &TaskSpec,
    plan: &ContaminationPlan,
    seed: u64,
) -> Result<(Vec<String>, ContaminationManifest)> {
    plan.validate()?;
    if clean_lines.is_empty() {
        return Err(Error::Empty("clean corpus"));
    }
    let (seen, unseen) = split_seen_unseen(task, plan.seen_fraction, seed)?;
    let sources: Vec<&LabeledExample> = if plan.include_train_labels {
        task.train.iter().chain(&seen).collect()
    } else {
        seen.iter().collect()
    };
    if plan.copies > 0 && sources.is_empty() {
        return Err(Error::Config("copies > 0 with an empty task".into()));
    }
    let mut labeled_lines = BTreeMap::new();
    if plan.copies > 0 {
        for ex in &sources {
            labeled_lines.insert(ex.id, format_labeled_line(ex, plan.label_format)?);
        }
    }

    // None marks a clean line.
    let mut pool: Vec<(Option<(usize, usize)>, &str)> = clean_lines.iter().map(|l| (None, l.as_str())).collect();
    for copy in 0..plan.copies {
        for ex in &sources {
            pool.push((Some((ex.id, copy)), labeled_lines[&ex.id].as_str()));
        }
    }
    let total = pool.len();
    let contaminated = total - clean_lines.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_c0ff_ee00);

    let (order, sections) = match plan.placement {
        Placement::Shuffled => {
            pool.shuffle(&mut rng);
            (pool, None)
        }
        Placement::Stage(stage) => {
            let bounds = section_bounds(total);
            let (lo, hi) = bounds[stage.index()];
            if contaminated > hi - lo {
                return Err(Error::Config(format!(
                    "{contaminated} labeled lines do not fit in a section of {} lines",
                    hi - lo
                )));
            }
            let (mut clean, labeled): (Vec<_>, Vec<_>) = pool.into_iter().partition(|(tag, _)| tag.is_none());
            clean.shuffle(&mut rng);
            let mut clean = clean.into_iter();
            let mut out = Vec::with_capacity(total);
            for (i, &(s, e)) in bounds.iter().enumerate() {
                let mut section: Vec<_> = if i == stage.index() {
                    let fill = (e - s) - contaminated;
                    labeled.iter().cloned().chain(clean.by_ref().take(fill)).collect()
                } else {
                    clean.by_ref().take(e - s).collect()
                };
                section.shuffle(&mut rng);
                out.extend(section);
            }
            (out, Some(bounds))
        }
    };

    let section_of = |line: usize| -> Option<Stage> {
        sections.map(|b| Stage::ALL[b.iter().position(|&(s, e)| line >= s && line < e).expect("in range")])
    };
    let mut injected = Vec::with_capacity(contaminated);
    let mut lines = Vec::with_capacity(total);
    for (i, (tag, text)) in order.into_iter().enumerate() {
        if let Some((example_id, copy)) = tag {
            injected.push(InjectedLine { example_id, copy, line: i, section: section_of(i) });
        }
        lines.push(text.to_string());
    }
    let manifest = ContaminationManifest {
        task: task.name.clone(),
        plan: plan.clone(),
        seed,
        clean_line_count: clean_lines.len(),
        total_lines: total,
        clean_digest: sorted_digest(clean_lines.iter().map(String::as_str)),
        seen_ids: seen.iter().map(|e| e.id).collect(),
        unseen_ids: unseen.iter().map(|e| e.id).collect(),
        labeled_lines,
        sections,
        injected,
    };
    Ok((lines, manifest))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Count,
    Range,
    Text,
    Containment,
    Multiset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// First violation found, if any.
    pub failure: Option<Violation>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Re-derives counts, section containment and the line multiset of a
/// corpus from its manifest.
pub fn verify_manifest(corpus: &[String], manifest: &ContaminationManifest) -> VerifyReport {
    match verify_inner(corpus, manifest) {
        Ok(()) => VerifyReport { failure: None },
        Err(v) => VerifyReport { failure: Some(v) },
    }
}

fn verify_inner(corpus: &[String], m: &ContaminationManifest) -> Result<(), Violation> {
    let fail = |kind, detail: String| Err(Violation { kind, detail });
    let sources = m.labeled_lines.len();
    let expected_injected = m.plan.copies * sources;
    if m.injected.len() != expected_injected {
        return fail(
            ViolationKind::Count,
            format!("{} injected records, expected {} x {sources}", m.injected.len(), m.plan.copies),
        );
    }
    if corpus.len() != m.total_lines || m.clean_line_count + expected_injected != m.total_lines {
        return fail(
            ViolationKind::Count,
            format!(
                "corpus has {} lines, manifest says {} ({} clean + {expected_injected} injected)",
                corpus.len(),
                m.total_lines,
                m.clean_line_count
            ),
        );
    }

    if let (Placement::Stage(stage), Some(bounds)) = (m.plan.placement, m.sections) {
        if bounds != section_bounds(m.total_lines) {
            return fail(ViolationKind::Containment, format!("section bounds {bounds:?} are not equal thirds"));
        }
        let (lo, hi) = bounds[stage.index()];
        let labeled: HashSet<&str> = m.labeled_lines.values().map(String::as_str).collect();
        if let Some(i) = corpus.iter().enumerate().position(|(i, l)| (i < lo || i >= hi) && labeled.contains(l.as_str())) {
            return fail(ViolationKind::Containment, format!("labeled line at {i} outside {stage} section {lo}..{hi}"));
        }
    }

    let mut used = HashSet::new();
    let mut copies: HashMap<usize, HashSet<usize>> = HashMap::new();
    for r in &m.injected {
        if r.line >= corpus.len() || !used.insert(r.line) {
            return fail(ViolationKind::Range, format!("record for line {} out of range or repeated", r.line));
        }
        let Some(text) = m.labeled_lines.get(&r.example_id) else {
            return fail(ViolationKind::Range, format!("unknown example {}", r.example_id));
        };
        if corpus[r.line] != *text {
            return fail(ViolationKind::Text, format!("line {} is not example {}", r.line, r.example_id));
        }
        if r.copy >= m.plan.copies || !copies.entry(r.example_id).or_default().insert(r.copy) {
            return fail(ViolationKind::Count, format!("bad copy index {} for example {}", r.copy, r.example_id));
        }
        if let (Placement::Stage(stage), Some(bounds)) = (m.plan.placement, m.sections) {
            let (lo, hi) = bounds[stage.index()];
            if r.line < lo || r.line >= hi || r.section != Some(stage) {
                return fail(ViolationKind::Containment, format!("record for line {} outside {stage} section", r.line));
            }
        }
    }

    let clean = corpus.iter().enumerate().filter(|(i, _)| !used.contains(i)).map(|(_, l)| l.as_str());
    if sorted_digest(clean) != m.clean_digest {
        return fail(ViolationKind::Multiset, "clean lines differ from the recorded multiset".into());
    }
    Ok(())
}

/// Copy count and clean-line count realizing a contaminated:total ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioPlan {
    pub copies: usize,
    pub clean_lines: usize,
}

impl RatioPlan {
    pub fn total(&self, labeled: usize) -> usize {
        self.clean_lines + self.copies * labeled
    }
}

/// Picks `copies` so `copies × labeled` is closest to `ratio × target_total`,
/// then sizes the clean part so contaminated / total matches `ratio` to
/// within one instance.
pub fn ratio_plan(labeled: usize, ratio: (usize, usize), target_total: usize) -> Result<RatioPlan> {
    let (num, den) = ratio;
    if num == 0 || den <= num || labeled == 0 {
        return Err(Error::Config(format!("ratio {num}:{den} with {labeled} labeled lines is not realizable")));
    }
    let slots = target_total as f64 * num as f64 / den as f64;
    let copies = ((slots / labeled as f64).round() as usize).max(1);
    let contaminated = copies * labeled;
    let clean_lines = (contaminated as f64 * (den - num) as f64 / num as f64).round() as usize;
    Ok(RatioPlan { copies, clean_lines })
}

/// [`inject`] with copy and clean-line counts chosen by [`ratio_plan`].
/// Clean lines are taken from the front of `clean_source`.
pub fn ratio_build(
    task: &TaskSpec,
    plan: &ContaminationPlan,
    ratio: (usize, usize),
    target_total: usize,
    clean_source: &[String],
    seed: u64,
) -> Result<(Vec<String>, ContaminationManifest)> {
    plan.validate()?;
    let seen = split_seen_unseen(task, plan.seen_fraction, seed)?.0.len();
    let labeled = seen + if plan.include_train_labels { task.train.len() } else { 0 };
    let rp = ratio_plan(labeled, ratio, target_total)?;
    if clean_source.len() < rp.clean_lines {
        return Err(Error::Config(format!(
            "ratio needs {} clean lines, source has {}",
            rp.clean_lines,
            clean_source.len()
        )));
    }
    let plan = ContaminationPlan { copies: rp.copies, ..plan.clone() };
    inject(&clean_source[..rp.clean_lines], task, &plan, seed)
}
