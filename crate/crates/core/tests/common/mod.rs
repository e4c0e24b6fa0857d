#![allow(dead_code)]

use contamlab::contamination::{inject, ContaminationManifest, ContaminationPlan};
use contamlab::model::ModelConfig;
use contamlab::textdata::{gen_clean_corpus, gen_task, CorpusGen, TaskGen, TaskSpec, Vocab};
use contamlab::training::PretrainConfig;

/// A small task and corpus that train in well under a second.
pub struct Fixture {
    pub clean: Vec<String>,
    pub task: TaskSpec,
    pub corpus: Vec<String>,
    pub manifest: ContaminationManifest,
    pub vocab: Vocab,
}

pub fn corpus_gen() -> CorpusGen {
    CorpusGen { num_lines: 300, vocab_size: 120, line_len: (4, 8), ..Default::default() }
}

pub fn task_gen() -> TaskGen {
    TaskGen { num_classes: 3, num_train: 40, num_test: 20, text_len: (4, 6), cue_rank_offset: 30, ..Default::default() }
}

pub fn fixture(plan: &ContaminationPlan, seed: u64) -> Fixture {
    let cg = corpus_gen();
    let task = gen_task("fixture", &task_gen(), &cg, seed).unwrap();
    let exclude: Vec<String> = task.train.iter().chain(&task.test).map(|e| e.text.clone()).collect();
    let clean = gen_clean_corpus(&cg, seed + 1, &exclude).unwrap();
    let (corpus, manifest) = inject(&clean, &task, plan, seed).unwrap();
    let mut lines = clean.clone();
    lines.extend(task.all_lines());
    let vocab = Vocab::build(&lines, 1).unwrap();
    Fixture { clean, task, corpus, manifest, vocab }
}

pub fn small_plan(copies: usize) -> ContaminationPlan {
    ContaminationPlan { copies, include_train_labels: false, ..Default::default() }
}

pub fn tiny_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig { hidden_dim: 16, num_heads: 2, ffn_dim: 32, max_seq_len: 16, ..ModelConfig::tiny(vocab.len()) }
}

pub fn quick_pretrain() -> PretrainConfig {
    PretrainConfig { batch_size: 16, peak_lr: 3e-3, ..Default::default() }
}

/// A cell small enough for sweep-level tests.
pub fn tiny_cell() -> contamlab::lab::CellConfig {
    use contamlab::evaluation::FinetuneConfig;
    let mut c = contamlab::lab::CellConfig::toy_reference();
    c.corpus = corpus_gen();
    c.task = task_gen();
    c.model = "tiny".into();
    c.plan.copies = 2;
    c.pretrain = quick_pretrain();
    c.finetune = FinetuneConfig { epochs: 1, lr: 1e-3, train_subset_size: None, ..Default::default() };
    c
}

pub fn tiny_spec(preset: &str, axis: Vec<contamlab::lab::AxisPoint>, trials: usize) -> contamlab::lab::ExperimentSpec {
    contamlab::lab::ExperimentSpec {
        preset: preset.into(),
        axis,
        base: tiny_cell(),
        num_trials: trials,
        seed_policy: Default::default(),
        out_dir: None,
        reference_notes: vec!["reference note".into()],
    }
}
