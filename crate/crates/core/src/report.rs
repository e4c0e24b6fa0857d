//! Tables, plot-ready series and markdown summaries of sweep results. Every
//! number is formatted from stored records, so re-emission is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lab::{aggregate, seed_tradeoff_records, AggregateRow, AxisPoint, RunRecord, TRADEOFF_MIN_TRIALS};

pub const FULL_SCALE_LABEL: &str = "paper-scale, not reproduced here";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

pub const TABLE_COLUMNS: [&str; 8] =
    ["axis", "n", "mem_mean", "mem_sd", "expl_mean", "expl_sd", "unseen_acc_mean", "unseen_acc_sd"];
pub const APPEARS_COLUMNS: [&str; 4] = ["epochs", "appears", "seen", "expl"];

fn num(v: f64) -> String {
    format!("{v:.2}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn render(header: &[&str], rows: &[Vec<String>], format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            let _ = writeln!(out, "{}", header.join(","));
            for r in rows {
                let cells: Vec<String> =
                    r.iter().map(|c| if c.contains([',', '"']) { format!("\"{}\"", c.replace('"', "\"\"")) } else { c.clone() }).collect();
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", header.iter().map(|_| "---|").collect::<String>());
            for r in rows {
                let cells: Vec<&str> = r.iter().map(|c| if c.is_empty() { "n/a" } else { c.as_str() }).collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
        }
    }
    out
}

/// Table text. Appears-vs-seen sweeps use the `epochs, appears, seen, expl`
/// layout; all others use [`TABLE_COLUMNS`].
pub fn format_table(rows: &[AggregateRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Empty("aggregate rows"));
    }
    if rows.iter().all(|r| matches!(r.axis, AxisPoint::AppearsVsSeen { .. })) {
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let AxisPoint::AppearsVsSeen { epochs, copies } = r.axis else { unreachable!() };
                vec![epochs.to_string(), copies.to_string(), (epochs * copies).to_string(), num(r.expl.mean)]
            })
            .collect();
        return Ok(render(&APPEARS_COLUMNS, &body, format));
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.axis.label(),
                r.n().to_string(),
                num(r.mem.mean),
                opt(r.mem.sd),
                num(r.expl.mean),
                opt(r.expl.sd),
                num(r.unseen_acc.mean),
                opt(r.unseen_acc.sd),
            ]
        })
        .collect();
    Ok(render(&TABLE_COLUMNS, &body, format))
}

pub fn emit_table(rows: &[AggregateRow], format: TableFormat, path: &Path) -> Result<()> {
    let text = format_table(rows, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSeries {
    pub name: String,
    pub mean: Vec<f64>,
    pub sd: Vec<Option<f64>>,
    /// Uncontaminated reference level, drawn as a horizontal line.
    pub baseline: Option<f64>,
}

/// Plot-ready values of one sweep, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub sweep: String,
    pub x_label: String,
    pub x: Vec<String>,
    pub measures: Vec<MeasureSeries>,
}

impl Series {
    pub fn from_rows(sweep: &str, rows: &[AggregateRow]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("aggregate rows"))?;
        let x = rows.iter().map(|r| r.axis.x().map_or_else(|| r.axis.label(), |v| v.to_string())).collect();
        let baseline_row = rows.iter().find(|r| matches!(r.axis, AxisPoint::Copies { copies: 0 }));
        let measure = |name: &str, f: fn(&AggregateRow) -> &crate::evaluation::Summary, base: bool| MeasureSeries {
            name: name.to_string(),
            mean: rows.iter().map(|r| f(r).mean).collect(),
            sd: rows.iter().map(|r| f(r).sd).collect(),
            baseline: if base { baseline_row.map(|r| f(r).mean) } else { None },
        };
        Ok(Series {
            sweep: sweep.to_string(),
            x_label: first.axis.name().to_string(),
            x,
            measures: vec![
                measure("mem", |r| &r.mem, true),
                measure("expl", |r| &r.expl, true),
                measure("unseen_acc", |r| &r.unseen_acc, false),
            ],
        })
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.measures {
            if m.mean.len() != self.x.len() || m.sd.len() != self.x.len() {
                return Err(Error::Invalid(format!(
                    "series {} has {} x values but {} means and {} deviations",
                    m.name,
                    self.x.len(),
                    m.mean.len(),
                    m.sd.len()
                )));
            }
        }
        Ok(())
    }
}

/// Tab-separated `x, mean, mean−sd, mean+sd` blocks, one per measure,
/// separated by two blank lines. A missing SD collapses the band to the mean.
pub fn format_plot_data(series: &Series) -> Result<String> {
    series.validate()?;
    let mut out = String::new();
    for (i, m) in series.measures.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# {} {} vs {}", series.sweep, m.name, series.x_label);
        if let Some(b) = m.baseline {
            let _ = writeln!(out, "# baseline {}", num(b));
        }
        let _ = writeln!(out, "{}\tmean\tlower\tupper", series.x_label);
        for ((x, mean), sd) in series.x.iter().zip(&m.mean).zip(&m.sd) {
            let s = sd.unwrap_or(0.0);
            let _ = writeln!(out, "{x}\t{}\t{}\t{}", num(*mean), num(mean - s), num(mean + s));
        }
    }
    Ok(out)
}

pub fn emit_plot_data(series: &Series, path: &Path) -> Result<()> {
    let text = format_plot_data(series)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Context printed in a summary header.
#[derive(Debug, Clone, Default)]
pub struct SummaryContext<'a> {
    pub preset: &'a str,
    pub config_fingerprint: &'a str,
    pub base_seed: u64,
    pub reference_notes: &'a [String],
}

/// Markdown report: header, aggregate table, seed trade-off (when a point has
/// enough trials), manifest digests and labeled full-scale reference values.
pub fn format_summary(ctx: &SummaryContext<'_>, records: &[RunRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Sweep `{}`\n", ctx.preset);
    let _ = writeln!(out, "- config fingerprint: `{}`", ctx.config_fingerprint);
    let _ = writeln!(out, "- base seed: {}", ctx.base_seed);
    let completed: Vec<RunRecord> = records.iter().filter(|r| r.completed()).cloned().collect();
    let failed = records.len() - completed.len();
    let _ = writeln!(out, "- trials: {} completed, {} failed\n", completed.len(), failed);

    if completed.is_empty() {
        let _ = writeln!(out, "no completed trials");
    } else if let Ok(rows) = aggregate(&completed) {
        let _ = writeln!(out, "## Results (percentage points)\n");
        if let Ok(t) = format_table(&rows, TableFormat::Markdown) {
            out.push_str(&t);
        }
        let mut tradeoffs = String::new();
        for row in &rows {
            let group: Vec<RunRecord> = completed.iter().filter(|r| r.axis_index == row.axis_index).cloned().collect();
            if group.len() >= TRADEOFF_MIN_TRIALS {
                if let Ok(t) = seed_tradeoff_records(&group, 3) {
                    let _ = writeln!(
                        tradeoffs,
                        "- {}: {}/{} of the top-{} Expl trials are among the {} worst for unseen accuracy; rank correlation {:.2}",
                        row.axis.label(),
                        t.overlap,
                        t.k,
                        t.k,
                        t.k,
                        t.rank_correlation
                    );
                }
            }
        }
        if !tradeoffs.is_empty() {
            let _ = writeln!(out, "\n## Seed trade-off\n\n{tradeoffs}");
            let _ = writeln!(
                out,
                "Reference ({FULL_SCALE_LABEL}): two of the three best seeds for Expl were among the three worst for generalization."
            );
        }
        let _ = writeln!(out, "\n## Manifest digests\n");
        for row in &rows {
            let _ = writeln!(out, "- {}: `{}`", row.axis.label(), row.manifest_digest.as_deref().unwrap_or("unknown"));
        }
    }
    if failed > 0 {
        let _ = writeln!(out, "\n## Failures\n");
        for r in records.iter().filter(|r| !r.completed()) {
            let _ = writeln!(out, "- {} trial {}: {}", r.axis.label(), r.trial, r.failure.as_deref().unwrap_or("unknown"));
        }
    }
    if !ctx.reference_notes.is_empty() {
        let _ = writeln!(out, "\n## Reference values ({FULL_SCALE_LABEL})\n");
        for n in ctx.reference_notes {
            let _ = writeln!(out, "- {n}");
        }
    }
    out
}

pub fn emit_summary(ctx: &SummaryContext<'_>, records: &[RunRecord], path: &Path) -> Result<()> {
    std::fs::write(path, format_summary(ctx, records)).map_err(|e| Error::io(path, e))
}
