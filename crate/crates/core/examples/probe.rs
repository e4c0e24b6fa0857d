//! Cloze-probe a pretrained checkpoint on seen and unseen test instances (Mem).
//!
//! Usage: `cargo run --release --example probe -- [out_dir]` (after `pretrain`)

mod shared;

use contamlab::contamination::ContaminationManifest;
use contamlab::evaluation::{mem_probe, write_records};
use contamlab::textdata::{ingest_task, Vocab};
use contamlab::training::ModelCheckpoint;

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let out = shared::out_dir("example-out");
    let ckpt = ModelCheckpoint::load(&out.join("checkpoint.ctlb"))?;
    let manifest = ContaminationManifest::load(&out.join("manifest.json"))?;
    let vocab = Vocab::load(&out.join("vocab.txt"))?;
    let task = ingest_task("task", &out.join("train.tsv"), &out.join("test.tsv"))?;
    let pick = |ids: &[usize]| -> Vec<_> { task.test.iter().filter(|e| ids.contains(&e.id)).cloned().collect() };
    let (seen, unseen) = (pick(&manifest.seen_ids), pick(&manifest.unseen_ids));

    let probe = mem_probe(&ckpt.params, &vocab, &task, &seen, &unseen, manifest.plan.label_format)?;
    write_records(&out.join("probe_records.jsonl"), &probe.records)?;
    println!("probe accuracy: seen {:.3}, unseen {:.3}", probe.acc_seen, probe.acc_unseen);
    println!("Mem = {:.2} points", probe.mem);
    Ok(())
}
