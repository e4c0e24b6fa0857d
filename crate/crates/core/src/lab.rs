//! Declarative sweeps: corpus construction, pretraining, probing and
//! fine-tuning for every axis point and trial, with resumable result storage.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contamination::{
    inject, ratio_build, split_seen_unseen, ContaminationManifest, ContaminationPlan, Placement, Stage,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    expl_score, finetune, mem_probe, write_records, FinetuneConfig, FinetuneResult, ProbeResult, Summary,
};
use crate::model::ModelConfig;
use crate::textdata::{gen_clean_corpus, gen_task, CorpusGen, LabeledExample, TaskGen, TaskSpec, Vocab};
use crate::training::{continue_pretrain, fingerprint, pretrain, LrPolicy, ModelCheckpoint, PretrainConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CONTAMLAB_THREADS";

/// Worker count: [`THREADS_ENV`] if set, else the available parallelism.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

/// Fixed-ratio corpus construction: `ratio` contaminated lines per total,
/// scaled to about `target_total` lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSpec {
    pub ratio: (usize, usize),
    pub target_total: usize,
}

/// Everything that determines one axis point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellConfig {
    pub corpus: CorpusGen,
    pub task: TaskGen,
    /// Seeds corpus and task generation, the seen/unseen split and injection.
    pub data_seed: u64,
    pub plan: ContaminationPlan,
    pub ratio: Option<RatioSpec>,
    /// Model preset name, see [`ModelConfig::by_name`].
    pub model: String,
    pub pretrain: PretrainConfig,
    /// Pretrain on the clean corpus first (one epoch), then continue on the
    /// contaminated corpus with `pretrain`.
    pub second_stage: bool,
    pub finetune: FinetuneConfig,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig::toy_reference()
    }
}

impl CellConfig {
    /// Desk-scale setup used by the acceptance suite and all presets.
    pub fn toy_reference() -> Self {
        CellConfig {
            corpus: CorpusGen::default(),
            task: TaskGen::default(),
            data_seed: 17,
            plan: ContaminationPlan { copies: 100, include_train_labels: false, ..Default::default() },
            ratio: None,
            model: "toy".into(),
            pretrain: PretrainConfig { peak_lr: TOY_PRETRAIN_LR, ..Default::default() },
            second_stage: false,
            finetune: FinetuneConfig { lr: TOY_FINETUNE_LR, ..Default::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.plan.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        ModelConfig::by_name(&self.model, 100)?;
        Ok(())
    }
}

/// Peak pretraining learning rate of the toy setup.
pub const TOY_PRETRAIN_LR: f64 = 1e-3;
/// Fine-tuning learning rate of the toy setup.
pub const TOY_FINETUNE_LR: f64 = 5e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrChoice {
    Decay,
    Constant,
}

/// One value on a sweep axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum AxisPoint {
    Copies { copies: usize },
    LabelMaskProb { q: f64 },
    CorpusSize { clean_lines: usize },
    ModelSize { model: String },
    Stage { stage: Stage, lr: LrChoice },
    BatchSize { batch_size: usize },
    AppearsVsSeen { epochs: usize, copies: usize },
    Ratio { target_total: usize },
}

impl AxisPoint {
    pub fn name(&self) -> &'static str {
        match self {
            AxisPoint::Copies { .. } => "copies",
            AxisPoint::LabelMaskProb { .. } => "label_mask_prob",
            AxisPoint::CorpusSize { .. } => "clean_lines",
            AxisPoint::ModelSize { .. } => "model",
            AxisPoint::Stage { .. } => "stage",
            AxisPoint::BatchSize { .. } => "batch_size",
            AxisPoint::AppearsVsSeen { .. } => "epochs_copies",
            AxisPoint::Ratio { .. } => "target_total",
        }
    }

    pub fn label(&self) -> String {
        match self {
            AxisPoint::Copies { copies } => copies.to_string(),
            AxisPoint::LabelMaskProb { q } => q.to_string(),
            AxisPoint::CorpusSize { clean_lines } => clean_lines.to_string(),
            AxisPoint::ModelSize { model } => model.clone(),
            AxisPoint::Stage { stage, lr } => format!("{stage}/{}", if *lr == LrChoice::Decay { "decay" } else { "constant" }),
            AxisPoint::BatchSize { batch_size } => batch_size.to_string(),
            AxisPoint::AppearsVsSeen { epochs, copies } => format!("{epochs}x{copies}"),
            AxisPoint::Ratio { target_total } => target_total.to_string(),
        }
    }

    /// Numeric x value for plots, when the axis has one.
    pub fn x(&self) -> Option<f64> {
        match self {
            AxisPoint::Copies { copies } => Some(*copies as f64),
            AxisPoint::LabelMaskProb { q } => Some(*q),
            AxisPoint::CorpusSize { clean_lines } => Some(*clean_lines as f64),
            AxisPoint::BatchSize { batch_size } => Some(*batch_size as f64),
            AxisPoint::AppearsVsSeen { epochs, copies } => Some((epochs * copies) as f64),
            AxisPoint::Ratio { target_total } => Some(*target_total as f64),
            AxisPoint::ModelSize { .. } | AxisPoint::Stage { .. } => None,
        }
    }

    /// `base` with this point's setting applied.
    pub fn apply(&self, base: &CellConfig) -> CellConfig {
        let mut c = base.clone();
        match self {
            AxisPoint::Copies { copies } => c.plan.copies = *copies,
            AxisPoint::LabelMaskProb { q } => c.pretrain.label_mask_prob = Some(*q),
            AxisPoint::CorpusSize { clean_lines } => c.corpus.num_lines = *clean_lines,
            AxisPoint::ModelSize { model } => c.model = model.clone(),
            AxisPoint::Stage { stage, lr } => {
                c.plan.placement = Placement::Stage(*stage);
                if *lr == LrChoice::Constant {
                    c.pretrain.lr_policy = LrPolicy::Constant { value: constant_lr_for(c.pretrain.peak_lr) };
                }
            }
            AxisPoint::BatchSize { batch_size } => c.pretrain.batch_size = *batch_size,
            AxisPoint::AppearsVsSeen { epochs, copies } => {
                c.pretrain.epochs = *epochs;
                c.plan.copies = *copies;
                c.second_stage = true;
            }
            AxisPoint::Ratio { target_total } => {
                let ratio = c.ratio.map_or((1, 10), |r| r.ratio);
                c.ratio = Some(RatioSpec { ratio, target_total: *target_total });
            }
        }
        c
    }
}

/// Constant learning rate matching the midpoint of a linear decay from
/// `peak` (2.77e-5 for a 5e-5 peak).
pub fn constant_lr_for(peak: f64) -> f64 {
    peak * (2.77e-5 / 5e-5)
}

/// Which stages draw fresh seeds per trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedPolicy {
    pub base_seed: u64,
    /// Each trial pretrains its own model.
    pub rerandomize_pretraining: bool,
    /// Each trial draws its own seen/unseen split; only valid without contamination.
    pub rerandomize_split: bool,
}

impl Default for SeedPolicy {
    fn default() -> Self {
        SeedPolicy { base_seed: 1000, rerandomize_pretraining: false, rerandomize_split: false }
    }
}

/// Seeds used by one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub data: u64,
    pub split: u64,
    pub pretrain: u64,
    pub finetune: u64,
}

impl SeedPolicy {
    pub fn seeds(&self, cell: &CellConfig, trial: usize) -> TrialSeeds {
        let t = trial as u64;
        TrialSeeds {
            data: cell.data_seed,
            split: if self.rerandomize_split { self.base_seed + 7919 * (t + 1) } else { cell.data_seed },
            pretrain: if self.rerandomize_pretraining { self.base_seed + t } else { cell.pretrain.seed },
            finetune: self.base_seed + t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub preset: String,
    pub axis: Vec<AxisPoint>,
    pub base: CellConfig,
    pub num_trials: usize,
    pub seed_policy: SeedPolicy,
    pub out_dir: Option<PathBuf>,
    /// Reference values at the original (much larger) scale; documentation only.
    #[serde(default)]
    pub reference_notes: Vec<String>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_trials == 0 {
            return Err(Error::Config("num_trials must be at least 1".into()));
        }
        if self.axis.is_empty() {
            return Err(Error::Config("sweep axis is empty".into()));
        }
        for point in &self.axis {
            let cell = point.apply(&self.base);
            cell.validate()?;
            if self.seed_policy.rerandomize_split && (cell.plan.copies > 0 || cell.ratio.is_some()) {
                return Err(Error::Config("per-trial splits require an uncontaminated corpus".into()));
            }
        }
        Ok(())
    }
}

pub const PRESETS: [&str; 9] = [
    "copies_sweep",
    "label_mask_sweep",
    "corpus_size_sweep",
    "model_size_sweep",
    "stage_sweep",
    "batch_sweep",
    "appears_vs_seen",
    "ratio_sweep",
    "baseline",
];

/// Stage placement confines all contaminated lines to a third of the corpus,
/// so the stage presets use fewer seen instances and a larger clean corpus.
pub fn stage_reference() -> CellConfig {
    let mut c = CellConfig::toy_reference();
    c.plan.copies = 200;
    c.task.num_test = 300;
    c.corpus.num_lines = 60_000;
    c
}

pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let base = CellConfig::toy_reference();
    let spec = |axis: Vec<AxisPoint>, base: CellConfig, trials: usize, notes: &[&str]| ExperimentSpec {
        preset: name.to_string(),
        axis,
        base,
        num_trials: trials,
        seed_policy: SeedPolicy::default(),
        out_dir: None,
        reference_notes: notes.iter().map(|s| s.to_string()).collect(),
    };
    Ok(match name {
        "copies_sweep" => spec(
            [0, 25, 100, 400].map(|copies| AxisPoint::Copies { copies }).to_vec(),
            base,
            5,
            &["Mem and Expl grow with the number of copies, reaching 60% Mem and about 40% Expl at 200 copies."],
        ),
        "label_mask_sweep" => spec(
            [0.0, 0.15, 0.5, 1.0].map(|q| AxisPoint::LabelMaskProb { q }).to_vec(),
            base,
            5,
            &["Higher label-masking probability raises both Mem and Expl."],
        ),
        "corpus_size_sweep" => spec(
            [10_000, 20_000, 40_000].map(|clean_lines| AxisPoint::CorpusSize { clean_lines }).to_vec(),
            base,
            5,
            &["Larger clean corpora dilute contamination and lower Mem and Expl."],
        ),
        "model_size_sweep" => spec(
            ["tiny", "toy", "small"].map(|m| AxisPoint::ModelSize { model: m.into() }).to_vec(),
            base,
            5,
            &["Larger models memorize and exploit more."],
        ),
        "stage_sweep" => {
            let mut axis = Vec::new();
            for lr in [LrChoice::Decay, LrChoice::Constant] {
                for stage in Stage::ALL {
                    axis.push(AxisPoint::Stage { stage, lr });
                }
            }
            spec(
                axis,
                stage_reference(),
                5,
                &["With linear decay, late contamination yields no Expl; a constant LR of 2.77e-5 removes the stage effect."],
            )
        }
        "batch_sweep" => spec(
            [4, 8, 16, 32].map(|batch_size| AxisPoint::BatchSize { batch_size }).to_vec(),
            base,
            5,
            &["With batch size 2, Mem reaches 49% and Expl reaches 14%."],
        ),
        "appears_vs_seen" => spec(
            [(1, 10), (5, 10), (1, 50)].map(|(epochs, copies)| AxisPoint::AppearsVsSeen { epochs, copies }).to_vec(),
            base,
            5,
            &["Expl of 2.07% (1 epoch, 10 appearances), 6.87% (5 epochs, 10 appearances) and 7.73% (1 epoch, 50 appearances)."],
        ),
        "ratio_sweep" => spec(
            [22_500, 45_000, 90_000].map(|target_total| AxisPoint::Ratio { target_total }).to_vec(),
            CellConfig { ratio: Some(RatioSpec { ratio: (1, 10), target_total: 45_000 }), ..base },
            5,
            &["At a constant 1:10 contamination ratio, larger corpora still raise Mem and Expl."],
        ),
        "baseline" => spec(
            vec![AxisPoint::Copies { copies: 0 }],
            base,
            10,
            &["Uncontaminated baselines stay near zero for both measures."],
        ),
        other => return Err(Error::UnknownPreset(other.to_string())),
    })
    .map(|mut s| {
        if name == "baseline" {
            s.seed_policy.rerandomize_split = true;
        }
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub mem: f64,
    pub expl: f64,
    pub probe_acc_seen: f64,
    pub probe_acc_unseen: f64,
    pub task_acc_seen: f64,
    pub task_acc_unseen: f64,
    /// Unseen task accuracy.
    pub generalization: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub preset: String,
    pub axis_index: usize,
    pub axis: AxisPoint,
    pub trial: usize,
    pub seeds: TrialSeeds,
    /// Identity of the trial configuration; resume key.
    pub fingerprint: String,
    pub checkpoint_fingerprint: Option<String>,
    pub manifest_digest: Option<String>,
    pub trace_digest: Option<String>,
    pub measures: Option<Measures>,
    pub failure: Option<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.measures.is_some()
    }

    /// Equality of everything but the wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| RunRecord { wall_time_s: 0.0, ..r.clone() };
        serde_json::to_string(&strip(self)).ok() == serde_json::to_string(&strip(other)).ok()
    }
}

#[derive(Serialize)]
struct TrialIdentity<'a> {
    preset: &'a str,
    cell: &'a CellConfig,
    trial: usize,
    seeds: &'a TrialSeeds,
}

#[derive(Serialize)]
struct PretrainIdentity<'a> {
    corpus: &'a CorpusGen,
    task: &'a TaskGen,
    data_seed: u64,
    plan: &'a ContaminationPlan,
    ratio: &'a Option<RatioSpec>,
    model: &'a str,
    pretrain: &'a PretrainConfig,
    second_stage: bool,
}

/// Key of the checkpoint produced by a cell's pretraining.
pub fn pretrain_key(cell: &CellConfig) -> String {
    fingerprint(&PretrainIdentity {
        corpus: &cell.corpus,
        task: &cell.task,
        data_seed: cell.data_seed,
        plan: &cell.plan,
        ratio: &cell.ratio,
        model: &cell.model,
        pretrain: &cell.pretrain,
        second_stage: cell.second_stage,
    })
}

/// Clean corpus, task and shared vocabulary of a cell.
#[derive(Debug, Clone)]
pub struct CellData {
    pub clean: Vec<String>,
    pub task: TaskSpec,
    pub vocab: Vocab,
}

pub fn build_data(cell: &CellConfig) -> Result<CellData> {
    let task = gen_task("synthetic", &cell.task, &cell.corpus, cell.data_seed)?;
    let mut corpus_cfg = cell.corpus.clone();
    if let Some(r) = cell.ratio {
        corpus_cfg.num_lines = corpus_cfg.num_lines.max(r.target_total);
    }
    let exclude: Vec<String> = task.train.iter().chain(&task.test).map(|e| e.text.clone()).collect();
    let clean = gen_clean_corpus(&corpus_cfg, cell.data_seed.wrapping_add(1), &exclude)?;
    let mut lines = clean.clone();
    lines.extend(task.all_lines());
    let vocab = Vocab::build(&lines, 1)?;
    Ok(CellData { clean, task, vocab })
}

pub fn build_corpus(cell: &CellConfig, data: &CellData) -> Result<(Vec<String>, ContaminationManifest)> {
    match cell.ratio {
        Some(r) => ratio_build(&data.task, &cell.plan, r.ratio, r.target_total, &data.clean, cell.data_seed),
        None => inject(&data.clean, &data.task, &cell.plan, cell.data_seed),
    }
}

/// Pretrained checkpoint of `cell`, loaded from `cache_dir` when present.
pub fn pretrained_checkpoint(
    cell: &CellConfig,
    data: &CellData,
    corpus: &[String],
    manifest: &ContaminationManifest,
    cache_dir: Option<&Path>,
) -> Result<ModelCheckpoint> {
    let key = pretrain_key(cell);
    let path = cache_dir.map(|d| d.join(format!("{key}.ctlb")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return ModelCheckpoint::load(p);
    }
    let model = ModelConfig::by_name(&cell.model, data.vocab.len())?;
    let ckpt = if cell.second_stage {
        let clean_cell = CellConfig {
            plan: ContaminationPlan { copies: 0, ..cell.plan.clone() },
            ratio: None,
            pretrain: PretrainConfig { epochs: 1, ..cell.pretrain.clone() },
            second_stage: false,
            ..cell.clone()
        };
        let (clean_corpus, clean_manifest) = build_corpus(&clean_cell, data)?;
        let first = pretrained_checkpoint(&clean_cell, data, &clean_corpus, &clean_manifest, cache_dir)?;
        continue_pretrain(&first, corpus, Some(manifest), &data.vocab, &cell.pretrain)?.checkpoint
    } else {
        pretrain(corpus, Some(manifest), &data.vocab, &model, &cell.pretrain)?.checkpoint
    };
    if let Some(p) = &path {
        std::fs::create_dir_all(p.parent().expect("cache file has a parent")).map_err(|e| Error::io(p, e))?;
        ckpt.save(p)?;
    }
    Ok(ckpt)
}

fn examples_by_id<'a>(task: &'a TaskSpec, ids: &[usize]) -> Vec<LabeledExample> {
    let by_id: HashMap<usize, &'a LabeledExample> = task.test.iter().map(|e| (e.id, e)).collect();
    ids.iter().filter_map(|i| by_id.get(i).map(|e| (*e).clone())).collect()
}

/// Append-only JSONL store of run records.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl RecordStore {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(RecordStore { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    pub fn append(&self, record: &RunRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("record store lock");
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        f.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_run_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
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

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Completed and failed records, ordered by axis point then trial.
    pub records: Vec<RunRecord>,
    pub failures: usize,
    /// Records produced by this invocation (resumed ones excluded).
    pub newly_run: usize,
    /// Pretraining runs performed by this invocation.
    pub pretrain_runs: usize,
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

struct CellJob {
    index: usize,
    point: AxisPoint,
    cell: CellConfig,
    pending: Vec<(usize, TrialSeeds, String)>,
}

/// Runs every pending (axis point, trial) of `spec`. Completed records found
/// in `out_dir/records.jsonl` are skipped by fingerprint; checkpoints are
/// cached under `out_dir/checkpoints`.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let out = spec.out_dir.clone();
    let records_path = out.as_ref().map(|d| d.join(RECORDS_FILE));
    let existing = match &records_path {
        Some(p) => read_run_records(p)?,
        None => Vec::new(),
    };
    let done: HashSet<String> = existing.iter().filter(|r| r.completed()).map(|r| r.fingerprint.clone()).collect();
    let store = records_path.as_deref().map(RecordStore::open).transpose()?;
    let cache = out.as_ref().map(|d| d.join("checkpoints"));
    let instances = out.as_ref().map(|d| d.join("instances"));

    let mut jobs = Vec::new();
    let mut kept: BTreeMap<String, RunRecord> = BTreeMap::new();
    for (index, point) in spec.axis.iter().enumerate() {
        let cell = point.apply(&spec.base);
        let mut pending = Vec::new();
        for trial in 0..spec.num_trials {
            let seeds = spec.seed_policy.seeds(&cell, trial);
            let trial_cell = CellConfig {
                pretrain: PretrainConfig { seed: seeds.pretrain, ..cell.pretrain.clone() },
                ..cell.clone()
            };
            let fp = fingerprint(&TrialIdentity { preset: &spec.preset, cell: &trial_cell, trial, seeds: &seeds });
            if done.contains(&fp) {
                if let Some(r) = existing.iter().rev().find(|r| r.fingerprint == fp) {
                    kept.insert(fp, r.clone());
                }
            } else {
                pending.push((trial, seeds, fp));
            }
        }
        if !pending.is_empty() {
            jobs.push(CellJob { index, point: point.clone(), cell, pending });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let pretrain_runs = Mutex::new(0usize);
    let results: Vec<Vec<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                run_cell(spec, job, cache.as_deref(), instances.as_deref(), store.as_ref(), &pretrain_runs)
            })
            .collect()
    });

    let mut records: Vec<RunRecord> = kept.into_values().collect();
    let newly: Vec<RunRecord> = results.into_iter().flatten().collect();
    let newly_run = newly.len();
    records.extend(newly);
    records.sort_by_key(|r| (r.axis_index, r.trial));
    let failures = records.iter().filter(|r| !r.completed()).count();
    if let Some(dir) = &out {
        let completed: Vec<RunRecord> = records.iter().filter(|r| r.completed()).cloned().collect();
        if !completed.is_empty() {
            let rows = aggregate(&completed)?;
            crate::report::emit_table(&rows, crate::report::TableFormat::Csv, &dir.join(AGGREGATE_FILE))?;
        }
    }
    let pretrain_runs = pretrain_runs.into_inner().expect("counter lock");
    Ok(SweepOutcome { records, failures, newly_run, pretrain_runs })
}

fn failed_record(spec: &ExperimentSpec, job: &CellJob, trial: usize, seeds: TrialSeeds, fp: &str, why: &Error, t0: Instant) -> RunRecord {
    RunRecord {
        preset: spec.preset.clone(),
        axis_index: job.index,
        axis: job.point.clone(),
        trial,
        seeds,
        fingerprint: fp.to_string(),
        checkpoint_fingerprint: None,
        manifest_digest: None,
        trace_digest: None,
        measures: None,
        failure: Some(why.to_string()),
        wall_time_s: t0.elapsed().as_secs_f64(),
    }
}

fn run_cell(
    spec: &ExperimentSpec,
    job: &CellJob,
    cache: Option<&Path>,
    instances: Option<&Path>,
    store: Option<&RecordStore>,
    pretrain_runs: &Mutex<usize>,
) -> Vec<RunRecord> {
    let t0 = Instant::now();
    let emit = |r: RunRecord| -> RunRecord {
        if let Some(s) = store {
            if let Err(e) = s.append(&r) {
                log::error!("could not store record: {e}");
            }
        }
        r
    };
    let prepared = (|| -> Result<_> {
        let data = build_data(&job.cell)?;
        let (corpus, manifest) = build_corpus(&job.cell, &data)?;
        Ok((data, corpus, manifest))
    })();
    let (data, corpus, manifest) = match prepared {
        Ok(p) => p,
        Err(e) => {
            return job.pending.iter().map(|(t, s, fp)| emit(failed_record(spec, job, *t, *s, fp, &e, t0))).collect()
        }
    };

    // One checkpoint per distinct pretraining seed.
    let mut checkpoints: HashMap<u64, std::result::Result<(ModelCheckpoint, Option<ProbeResult>), String>> =
        HashMap::new();
    let mut out = Vec::with_capacity(job.pending.len());
    for (trial, seeds, fp) in &job.pending {
        let t_trial = Instant::now();
        let cell = CellConfig {
            pretrain: PretrainConfig { seed: seeds.pretrain, ..job.cell.pretrain.clone() },
            ..job.cell.clone()
        };
        let entry = checkpoints.entry(seeds.pretrain).or_insert_with(|| {
            let key = pretrain_key(&cell);
            let cached = cache.is_some_and(|d| d.join(format!("{key}.ctlb")).exists());
            log::info!("{} {}: pretraining ({})", spec.preset, job.point.label(), if cached { "cached" } else { "fresh" });
            let r = pretrained_checkpoint(&cell, &data, &corpus, &manifest, cache).map(|c| (c, None));
            if !cached {
                *pretrain_runs.lock().expect("counter lock") += 1;
            }
            r.map_err(|e| e.to_string())
        });
        let result = match entry {
            Err(msg) => Err(Error::Invalid(msg.clone())),
            Ok((ckpt, probe_cache)) => run_trial(spec, job, &cell, &data, &manifest, ckpt, probe_cache, *trial, *seeds, fp, instances, t_trial),
        };
        out.push(emit(match result {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{} {} trial {trial} failed: {e}", spec.preset, job.point.label());
                failed_record(spec, job, *trial, *seeds, fp, &e, t_trial)
            }
        }));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    spec: &ExperimentSpec,
    job: &CellJob,
    cell: &CellConfig,
    data: &CellData,
    manifest: &ContaminationManifest,
    ckpt: &ModelCheckpoint,
    probe_cache: &mut Option<ProbeResult>,
    trial: usize,
    seeds: TrialSeeds,
    fp: &str,
    instances: Option<&Path>,
    t0: Instant,
) -> Result<RunRecord> {
    let (seen, unseen) = if spec.seed_policy.rerandomize_split {
        split_seen_unseen(&data.task, cell.plan.seen_fraction, seeds.split)?
    } else {
        (examples_by_id(&data.task, &manifest.seen_ids), examples_by_id(&data.task, &manifest.unseen_ids))
    };
    let probe = match (&probe_cache, spec.seed_policy.rerandomize_split) {
        (Some(p), false) => p.clone(),
        _ => {
            let p = mem_probe(&ckpt.params, &data.vocab, &data.task, &seen, &unseen, cell.plan.label_format)?;
            if !spec.seed_policy.rerandomize_split {
                *probe_cache = Some(p.clone());
            }
            p
        }
    };
    let ft_cfg = FinetuneConfig { seed: seeds.finetune, ..cell.finetune.clone() };
    let outcome = finetune(ckpt, &data.task, &data.vocab, &ft_cfg)?;
    let ft: FinetuneResult = expl_score(&outcome, &data.vocab, &seen, &unseen)?;
    if let Some(dir) = instances {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&dir.join(format!("{fp}.probe.jsonl")), &probe.records)?;
        write_records(&dir.join(format!("{fp}.task.jsonl")), &ft.records)?;
    }
    Ok(RunRecord {
        preset: spec.preset.clone(),
        axis_index: job.index,
        axis: job.point.clone(),
        trial,
        seeds,
        fingerprint: fp.to_string(),
        checkpoint_fingerprint: Some(ckpt.meta.fingerprint.clone()),
        manifest_digest: Some(ckpt.meta.manifest_digest.clone()),
        trace_digest: Some(ckpt.meta.trace_digest.clone()),
        measures: Some(Measures {
            mem: probe.mem,
            expl: ft.expl,
            probe_acc_seen: probe.acc_seen,
            probe_acc_unseen: probe.acc_unseen,
            task_acc_seen: ft.acc_seen,
            task_acc_unseen: ft.acc_unseen,
            generalization: ft.acc_unseen,
            final_train_loss: ft.final_train_loss,
        }),
        failure: None,
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// Aggregate of one axis point. Accuracies are in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub axis_index: usize,
    pub axis: AxisPoint,
    pub mem: Summary,
    pub expl: Summary,
    pub unseen_acc: Summary,
    pub manifest_digest: Option<String>,
}

impl AggregateRow {
    pub fn n(&self) -> usize {
        self.mem.n
    }
}

/// Mean, sample SD and SEM of Mem, Expl and unseen accuracy per axis point.
/// Failed records are ignored; a point without completed records is an error.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.axis_index).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::Empty("run records"));
    }
    groups
        .into_iter()
        .map(|(axis_index, rs)| {
            let ms: Vec<&Measures> = rs.iter().filter_map(|r| r.measures.as_ref()).collect();
            if ms.is_empty() {
                return Err(Error::Empty("completed trials at an axis point"));
            }
            let col = |f: fn(&Measures) -> f64| Summary::of(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
            Ok(AggregateRow {
                axis_index,
                axis: rs[0].axis.clone(),
                mem: col(|m| m.mem)?,
                expl: col(|m| m.expl)?,
                unseen_acc: col(|m| 100.0 * m.task_acc_unseen)?,
                manifest_digest: rs.iter().find_map(|r| r.manifest_digest.clone()),
            })
        })
        .collect()
}

/// Overlap between the trials best at Expl and worst at generalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub n: usize,
    pub k: usize,
    /// Trial indices of the `k` highest Expl values.
    pub top_expl: Vec<usize>,
    /// Trial indices of the `k` lowest unseen accuracies.
    pub bottom_generalization: Vec<usize>,
    pub overlap: usize,
    /// Spearman correlation between Expl and unseen accuracy (average ranks for ties).
    pub rank_correlation: f64,
}

pub const TRADEOFF_MIN_TRIALS: usize = 6;

/// Average ranks (1-based) of `values` in ascending order.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!("rank correlation of {} and {} values", a.len(), b.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Ranks trials by Expl (descending) and unseen accuracy (ascending); ties
/// keep trial order.
pub fn seed_tradeoff(expl: &[f64], generalization: &[f64], k: usize) -> Result<TradeoffReport> {
    let n = expl.len();
    if n != generalization.len() {
        return Err(Error::Invalid("expl and generalization lengths differ".into()));
    }
    if n < TRADEOFF_MIN_TRIALS || k == 0 || k > n {
        return Err(Error::Invalid(format!("seed trade-off needs at least {TRADEOFF_MIN_TRIALS} trials and 0 < k ≤ n; got n={n}, k={k}")));
    }
    let mut by_expl: Vec<usize> = (0..n).collect();
    by_expl.sort_by(|&a, &b| expl[b].total_cmp(&expl[a]));
    let mut by_gen: Vec<usize> = (0..n).collect();
    by_gen.sort_by(|&a, &b| generalization[a].total_cmp(&generalization[b]));
    let top: Vec<usize> = by_expl[..k].to_vec();
    let bottom: Vec<usize> = by_gen[..k].to_vec();
    let overlap = top.iter().filter(|t| bottom.contains(t)).count();
    Ok(TradeoffReport {
        n,
        k,
        top_expl: top,
        bottom_generalization: bottom,
        overlap,
        rank_correlation: spearman(expl, generalization)?,
    })
}

/// [`seed_tradeoff`] over the completed records of one axis point, which
/// must differ only in their fine-tuning seed.
pub fn seed_tradeoff_records(records: &[RunRecord], k: usize) -> Result<TradeoffReport> {
    let done: Vec<&RunRecord> = records.iter().filter(|r| r.completed()).collect();
    if let Some(first) = done.first() {
        let same_point = done.iter().all(|r| r.axis_index == first.axis_index);
        let same_pretrain = done.iter().all(|r| r.seeds.pretrain == first.seeds.pretrain && r.seeds.split == first.seeds.split);
        if !same_point || !same_pretrain {
            return Err(Error::Invalid("trials must differ only in their fine-tuning seed".into()));
        }
    }
    let expl: Vec<f64> = done.iter().map(|r| r.measures.as_ref().expect("completed").expl).collect();
    let gen: Vec<f64> = done.iter().map(|r| r.measures.as_ref().expect("completed").generalization).collect();
    seed_tradeoff(&expl, &gen, k)
}
