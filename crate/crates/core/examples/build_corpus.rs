//! Inject test instances into the clean corpus, then audit the manifest
//! and the stage-confined batch order.
//!
//! Usage: `cargo run --example build_corpus -- [out_dir]` (after `gen_data`)

mod shared;

use contamlab::contamination::{inject, section_bounds, verify_manifest, ContaminationPlan, Placement, Stage};
use contamlab::textdata::{ingest_task, read_corpus, write_corpus, Vocab};
use contamlab::training::{audit_stage_order, batch_schedule};

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let out = shared::out_dir("example-out");
    let cell = shared::quick_cell();
    let clean = read_corpus(&out.join("clean.txt"))?;
    let task = ingest_task("task", &out.join("train.tsv"), &out.join("test.tsv"))?;

    let (corpus, manifest) = inject(&clean, &task, &cell.plan, cell.data_seed)?;
    let audit = verify_manifest(&corpus, &manifest);
    println!(
        "{} lines, {} injected copies of {} seen instances; audit passed: {}",
        corpus.len(),
        manifest.injected.len(),
        manifest.seen_ids.len(),
        audit.passed()
    );

    let staged = ContaminationPlan { placement: Placement::Stage(Stage::Last), ..cell.plan.clone() };
    let (staged_corpus, staged_manifest) = inject(&clean, &task, &staged, cell.data_seed)?;
    let (lo, hi) = section_bounds(staged_corpus.len())[Stage::Last.index()];
    let schedule = batch_schedule(staged_corpus.len(), cell.pretrain.batch_size, 2, &staged_manifest.plan.placement, 0);
    let order = audit_stage_order(&schedule, &staged_manifest)?;
    println!("last-stage placement: lines {lo}..{hi}, order audit passed: {}", order.passed());

    let mut lines = clean.clone();
    lines.extend(task.all_lines());
    let vocab = Vocab::build(&lines, 1)?;
    write_corpus(&out.join("corpus.txt"), &corpus)?;
    manifest.save(&out.join("manifest.json"))?;
    vocab.save(&out.join("vocab.txt"))?;
    Ok(())
}
