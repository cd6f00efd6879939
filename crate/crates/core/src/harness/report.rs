use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, EvalMode, EvalReport, HarnessError, SplitName};
use crate::metrics::MetricMeans;
use crate::util::{self, write_json_pretty};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub mode: EvalMode,
    pub split: SplitName,
    pub n_evaluated: usize,
    pub metrics: MetricMeans,
    pub config_hash: String,
}

/// Methods as columns, one block of metric rows per test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub cutoffs: Vec<usize>,
    pub cells: Vec<TableCell>,
}

impl Table1 {
    pub fn cell(&self, mode: EvalMode, split: SplitName) -> Option<&TableCell> {
        self.cells.iter().find(|c| c.mode == mode && c.split == split)
    }
}

/// Gathers the stored test-split EvalReports of a run directory.
pub fn collect_table(run_dir: &Path) -> Result<Table1, HarnessError> {
    let mut cells = Vec::new();
    let mut cutoffs: Vec<usize> = Vec::new();
    for split in SplitName::TESTS {
        for mode in EvalMode::ALL {
            let p = run_dir
                .join("eval")
                .join(format!("{}_{}.json", mode.as_str(), split.as_str()));
            if !p.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            let r: EvalReport = serde_json::from_str(&text).map_err(|e| io_err(&p, e))?;
            for c in &r.cutoffs {
                if !cutoffs.contains(c) {
                    cutoffs.push(*c);
                }
            }
            cells.push(TableCell {
                mode,
                split,
                n_evaluated: r.n_evaluated,
                metrics: r.metrics,
                config_hash: r.provenance.config_hash,
            });
        }
    }
    if cells.is_empty() {
        return Err(HarnessError::MissingArtifact(format!(
            "no evaluation reports under {}; run `eval` first",
            run_dir.join("eval").display()
        )));
    }
    cutoffs.sort_unstable();
    Ok(Table1 { cutoffs, cells })
}

enum Row {
    Mmrr,
    Map,
    Recall(usize),
}

impl Row {
    fn label(&self) -> String {
        match self {
            Row::Mmrr => "MMRR".into(),
            Row::Map => "MAP".into(),
            Row::Recall(c) => format!("Recall@{c}"),
        }
    }

    /// Fraction metrics to 4 decimals, recall as a percentage to 2.
    fn format(&self, m: &MetricMeans, percent_sign: bool) -> String {
        match self {
            Row::Mmrr => format!("{:.4}", m.mmrr),
            Row::Map => format!("{:.4}", m.map),
            Row::Recall(c) => match m.recall.get(c) {
                Some(v) if percent_sign => format!("{:.2}%", 100.0 * v),
                Some(v) => format!("{:.2}", 100.0 * v),
                None => "-".into(),
            },
        }
    }
}

fn rows(t: &Table1) -> Vec<Row> {
    let mut r = vec![Row::Mmrr, Row::Map];
    r.extend(t.cutoffs.iter().map(|&c| Row::Recall(c)));
    r
}

pub fn render_text(t: &Table1) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "Metric");
    for m in EvalMode::ALL {
        let _ = write!(out, "{:>12}", m.label());
    }
    out.push('\n');
    for split in SplitName::TESTS {
        if !t.cells.iter().any(|c| c.split == split) {
            continue;
        }
        let _ = writeln!(out, "{} Evaluation", split.label());
        for row in rows(t) {
            let _ = write!(out, "{:<12}", row.label());
            for m in EvalMode::ALL {
                let v = t.cell(m, split).map_or_else(|| "-".into(), |c| row.format(&c.metrics, true));
                let _ = write!(out, "{v:>12}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn render_csv(t: &Table1) -> String {
    let mut out = String::from("split,metric");
    for m in EvalMode::ALL {
        out.push(',');
        out.push_str(m.label());
    }
    out.push('\n');
    for split in SplitName::TESTS {
        if !t.cells.iter().any(|c| c.split == split) {
            continue;
        }
        for row in rows(t) {
            let label = match row {
                Row::Recall(_) => format!("{} (%)", row.label()),
                _ => row.label(),
            };
            let _ = write!(out, "{},{label}", split.as_str());
            for m in EvalMode::ALL {
                let v = t.cell(m, split).map_or_else(String::new, |c| row.format(&c.metrics, false));
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `<run_dir>/report/table1.{json,csv,txt}`.
pub fn write_report(run_dir: &Path) -> Result<Table1, HarnessError> {
    let t = collect_table(run_dir)?;
    let dir = run_dir.join("report");
    let p = dir.join("table1.json");
    write_json_pretty(&p, &t).map_err(|e| io_err(&p, e))?;
    let p = dir.join("table1.csv");
    util::write_atomic(&p, render_csv(&t).as_bytes()).map_err(|e| io_err(&p, e))?;
    let p = dir.join("table1.txt");
    util::write_atomic(&p, render_text(&t).as_bytes()).map_err(|e| io_err(&p, e))?;
    Ok(t)
}
