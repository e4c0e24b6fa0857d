mod common;

use common::tiny_spec;
use contamlab::lab::{aggregate, run_sweep, AxisPoint};
use contamlab::report::{format_plot_data, format_summary, format_table, Series, SummaryContext, TableFormat, TABLE_COLUMNS};

#[test]
fn tables_series_and_summaries_agree_with_records() {
    let spec = tiny_spec("copies_sweep", vec![AxisPoint::Copies { copies: 0 }, AxisPoint::Copies { copies: 2 }], 6);
    let out = run_sweep(&spec).unwrap();
    let rows = aggregate(&out.records).unwrap();

    let csv = format_table(&rows, TableFormat::Csv).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), TABLE_COLUMNS);
    let parsed: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(parsed.len(), rows.len());
    for (rec, row) in parsed.iter().zip(&rows) {
        assert_eq!(rec[1].parse::<usize>().unwrap(), 6);
        let mem: f64 = rec[2].parse().unwrap();
        let expl: f64 = rec[4].parse().unwrap();
        assert!((mem - row.mem.mean).abs() <= 0.005 + 1e-9);
        assert!((expl - row.expl.mean).abs() <= 0.005 + 1e-9);
    }
    assert_eq!(&parsed[0][0], "0");

    let md = format_table(&rows, TableFormat::Markdown).unwrap();
    assert!(md.starts_with("| axis | n |"));

    let series = Series::from_rows("copies_sweep", &rows).unwrap();
    assert_eq!(series.measures[0].baseline, Some(rows[0].mem.mean));
    let plot = format_plot_data(&series).unwrap();
    assert_eq!(plot.split("\n\n\n").count(), 3);
    assert!(plot.contains("copies\tmean\tlower\tupper"));

    let notes = spec.reference_notes.clone();
    let ctx = SummaryContext { preset: "copies_sweep", config_fingerprint: "abc", base_seed: 1000, reference_notes: &notes };
    let summary = format_summary(&ctx, &out.records);
    assert!(summary.contains("## Seed trade-off"));
    assert!(summary.contains("## Manifest digests"));
    assert!(summary.contains("uncontaminated"));
    assert!(summary.contains("reference note"));
    assert_eq!(summary, format_summary(&ctx, &out.records));
}

#[test]
fn summary_of_nothing_says_so() {
    let ctx = SummaryContext { preset: "x", ..Default::default() };
    assert!(format_summary(&ctx, &[]).contains("no completed trials"));
    assert!(format_table(&[], TableFormat::Csv).is_err());
}
