//! Pretrain a tiny encoder on the contaminated corpus with masked language modeling.
//!
//! Usage: `cargo run --release --example pretrain -- [out_dir]` (after `build_corpus`)

mod shared;

use contamlab::contamination::ContaminationManifest;
use contamlab::model::ModelConfig;
use contamlab::textdata::{read_corpus, Vocab};
use contamlab::training::{pretrain, write_training_log};

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let out = shared::out_dir("example-out");
    let cell = shared::quick_cell();
    let corpus = read_corpus(&out.join("corpus.txt"))?;
    let manifest = ContaminationManifest::load(&out.join("manifest.json"))?;
    let vocab = Vocab::load(&out.join("vocab.txt"))?;
    let model = ModelConfig::by_name(&cell.model, vocab.len())?;
    println!("{} parameters", model.param_count());

    let outcome = pretrain(&corpus, Some(&manifest), &vocab, &model, &cell.pretrain)?;
    let every = (outcome.log.len() / 8).max(1);
    for r in outcome.log.iter().step_by(every) {
        println!("  step {:>5}  lr {:.2e}  loss {:.4}", r.step, r.lr, r.loss);
    }
    outcome.checkpoint.save(&out.join("checkpoint.ctlb"))?;
    write_training_log(&out.join("train_log.jsonl"), &outcome.log)?;
    println!("checkpoint {}", outcome.checkpoint.meta.fingerprint);
    Ok(())
}
