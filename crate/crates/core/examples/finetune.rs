//! Fine-tune a classifier on the task's training split and score seen vs
//! unseen test instances (Expl) for a few seeds.
//!
//! Usage: `cargo run --release --example finetune -- [out_dir]` (after `pretrain`)

mod shared;

use contamlab::contamination::ContaminationManifest;
use contamlab::evaluation::{expl_score, finetune, FinetuneConfig, Summary};
use contamlab::textdata::{ingest_task, Vocab};
use contamlab::training::ModelCheckpoint;

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let out = shared::out_dir("example-out");
    let cell = shared::quick_cell();
    let ckpt = ModelCheckpoint::load(&out.join("checkpoint.ctlb"))?;
    let manifest = ContaminationManifest::load(&out.join("manifest.json"))?;
    let vocab = Vocab::load(&out.join("vocab.txt"))?;
    let task = ingest_task("task", &out.join("train.tsv"), &out.join("test.tsv"))?;
    let pick = |ids: &[usize]| -> Vec<_> { task.test.iter().filter(|e| ids.contains(&e.id)).cloned().collect() };
    let (seen, unseen) = (pick(&manifest.seen_ids), pick(&manifest.unseen_ids));

    let mut expl = Vec::new();
    for seed in 1000..1003 {
        let cfg = FinetuneConfig { seed, ..cell.finetune.clone() };
        let outcome = finetune(&ckpt, &task, &vocab, &cfg)?;
        let r = expl_score(&outcome, &vocab, &seen, &unseen)?;
        println!("seed {seed}: seen {:.3}, unseen {:.3}, Expl {:.2}", r.acc_seen, r.acc_unseen, r.expl);
        expl.push(r.expl);
    }
    let s = Summary::of(&expl)?;
    println!("Expl = {:.2} ± {:.2} (SEM)", s.mean, s.sem.unwrap_or(0.0));
    Ok(())
}
