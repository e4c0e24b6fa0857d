//! Run a preset sweep on a scaled-down cell, resumably.
//!
//! Usage: `cargo run --release --example sweep -- [out_dir] [preset] [trials]`

mod shared;

use contamlab::lab::{aggregate, preset, run_sweep};

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let out = shared::out_dir("example-sweep");
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(2).map_or("copies_sweep", String::as_str);
    let mut spec = preset(name)?;
    spec.base = shared::quick_cell();
    spec.num_trials = args.get(3).map_or(2, |t| t.parse().expect("trials"));
    spec.out_dir = Some(out.clone());
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?).expect("write spec");

    let outcome = run_sweep(&spec)?;
    println!("{} records, {} new, {} failed, {} pretraining runs", outcome.records.len(), outcome.newly_run, outcome.failures, outcome.pretrain_runs);
    let completed: Vec<_> = outcome.records.into_iter().filter(|r| r.completed()).collect();
    for row in aggregate(&completed)? {
        println!("  {:>14}  Mem {:6.2}  Expl {:6.2}  n={}", row.axis.label(), row.mem.mean, row.expl.mean, row.n());
    }
    Ok(())
}
