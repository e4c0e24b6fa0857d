#![allow(dead_code)]

use std::path::PathBuf;

use contamlab::evaluation::FinetuneConfig;
use contamlab::lab::CellConfig;
use contamlab::textdata::{CorpusGen, TaskGen};
use contamlab::training::PretrainConfig;

/// A cell that runs end to end in a few seconds.
pub fn quick_cell() -> CellConfig {
    let mut c = CellConfig::toy_reference();
    c.corpus = CorpusGen { num_lines: 1500, vocab_size: 300, line_len: (4, 10), ..Default::default() };
    c.task = TaskGen { num_classes: 3, num_train: 60, num_test: 60, text_len: (4, 8), cue_rank_offset: 60, ..Default::default() };
    c.model = "tiny".into();
    c.plan.copies = 20;
    c.pretrain = PretrainConfig { batch_size: 16, peak_lr: 3e-3, epochs: 2, ..Default::default() };
    c.finetune = FinetuneConfig { epochs: 3, lr: 1e-3, train_subset_size: None, ..Default::default() };
    c
}

/// First command-line argument, or `default`.
pub fn out_dir(default: &str) -> PathBuf {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| default.to_string()));
    std::fs::create_dir_all(&dir).expect("create output directory");
    dir
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
}
