//! Compare the fine-tuning seeds that exploit contamination most with the
//! seeds that generalize worst.
//!
//! Usage: `cargo run --example seed_tradeoff -- [sweep_dir] [k]` (after `sweep` with at least 6 trials)

mod shared;

use contamlab::lab::{read_run_records, seed_tradeoff, seed_tradeoff_records, RECORDS_FILE};

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let dir = shared::out_dir("example-sweep");
    let k: usize = std::env::args().nth(2).map_or(1, |s| s.parse().expect("k"));
    let path = dir.join(RECORDS_FILE);
    let report = if path.exists() {
        let records = read_run_records(&path)?;
        let last = records.iter().map(|r| r.axis_index).max().unwrap_or(0);
        let cell: Vec<_> = records.into_iter().filter(|r| r.axis_index == last).collect();
        println!("axis point {last}: {} trials", cell.len());
        seed_tradeoff_records(&cell, k)?
    } else {
        println!("no records in {}; using a fixed example", dir.display());
        seed_tradeoff(&[4.0, 9.5, 1.0, 7.0, 3.0, 8.0], &[0.61, 0.52, 0.64, 0.55, 0.60, 0.58], k)?
    };
    println!("{report:#?}");
    Ok(())
}
