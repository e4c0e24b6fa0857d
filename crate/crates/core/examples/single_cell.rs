//! Pretrain one toy cell, probe it and fine-tune it with several seeds.
//!
//! Usage: `cargo run --release --example single_cell -- [copies] [finetune_seeds] [finetune_lr] [finetune_epochs]`

use contamlab::evaluation::{expl_score, finetune, mem_probe, FinetuneConfig, Summary};
use contamlab::lab::{self, CellConfig};
use contamlab::Result;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let copies: usize = args.first().map_or(100, |s| s.parse().expect("copies"));
    let seeds: u64 = args.get(1).map_or(3, |s| s.parse().expect("finetune seeds"));
    let mut cell = CellConfig::toy_reference();
    cell.plan.copies = copies;
    if let Some(lr) = args.get(2) {
        cell.finetune.lr = lr.parse().expect("finetune lr");
    }
    if let Some(e) = args.get(3) {
        cell.finetune.epochs = e.parse().expect("finetune epochs");
    }

    let data = lab::build_data(&cell)?;
    let (corpus, manifest) = lab::build_corpus(&cell, &data)?;
    println!("corpus {} lines, {} injected", corpus.len(), manifest.injected.len());
    let t0 = std::time::Instant::now();
    let ckpt = lab::pretrained_checkpoint(&cell, &data, &corpus, &manifest, None)?;
    println!("pretrained in {:.0}s", t0.elapsed().as_secs_f64());

    let pick = |ids: &[usize]| -> Vec<_> { data.task.test.iter().filter(|e| ids.contains(&e.id)).cloned().collect() };
    let (seen, unseen) = (pick(&manifest.seen_ids), pick(&manifest.unseen_ids));
    let probe = mem_probe(&ckpt.params, &data.vocab, &data.task, &seen, &unseen, cell.plan.label_format)?;
    println!("Mem {:.2} (seen {:.3}, unseen {:.3})", probe.mem, probe.acc_seen, probe.acc_unseen);

    let mut expl = Vec::new();
    for s in 0..seeds {
        let cfg = FinetuneConfig { seed: 1000 + s, ..cell.finetune.clone() };
        let outcome = finetune(&ckpt, &data.task, &data.vocab, &cfg)?;
        let r = expl_score(&outcome, &data.vocab, &seen, &unseen)?;
        println!("seed {}: Expl {:.2} (seen {:.3}, unseen {:.3}, loss {:.3})", cfg.seed, r.expl, r.acc_seen, r.acc_unseen, r.final_train_loss);
        expl.push(r.expl);
    }
    let s = Summary::of(&expl)?;
    println!("mean Expl {:.2} sem {:?}", s.mean, s.sem);
    Ok(())
}
