//! Render tables, plot data and a markdown summary from a sweep directory.
//!
//! Usage: `cargo run --example report -- [sweep_dir]` (after `sweep`)

mod shared;

use contamlab::lab::{aggregate, read_run_records, ExperimentSpec, RECORDS_FILE};
use contamlab::report::{emit_plot_data, emit_summary, format_table, Series, SummaryContext, TableFormat};
use contamlab::training::fingerprint;

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let dir = shared::out_dir("example-sweep");
    let spec: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json")).expect("spec.json"))?;
    let records = read_run_records(&dir.join(RECORDS_FILE))?;
    let completed: Vec<_> = records.iter().filter(|r| r.completed()).cloned().collect();
    let rows = aggregate(&completed)?;
    println!("{}", format_table(&rows, TableFormat::Markdown)?);
    emit_plot_data(&Series::from_rows(&spec.preset, &rows)?, &dir.join("plot.tsv"))?;
    let fp = fingerprint(&spec);
    let ctx = SummaryContext {
        preset: &spec.preset,
        config_fingerprint: &fp,
        base_seed: spec.seed_policy.base_seed,
        reference_notes: &spec.reference_notes,
    };
    emit_summary(&ctx, &records, &dir.join("summary.md"))?;
    println!("wrote plot.tsv and summary.md to {}", dir.display());
    Ok(())
}
