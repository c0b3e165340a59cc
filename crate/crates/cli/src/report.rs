//! Comparison table over eval reports and run summaries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use planforge_core::evalharness::{round1, EvalReport};
use planforge_core::orchestrator::RunSummary;

use crate::cmd::{EVAL_REPORT, RUN_SUMMARY};
use crate::fail::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub steps_completed: u64,
    pub total_steps: u64,
    pub alerts_raised: u64,
    pub final_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub label: String,
    pub source: PathBuf,
    pub protocol: Option<String>,
    pub run: Option<RunInfo>,
    /// Column name and score, in display order.
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub best: bool,
    pub second_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub source: PathBuf,
    pub protocol: Option<String>,
    pub run: Option<RunInfo>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Deserialize)]
struct SummaryFile {
    summary: RunSummary,
}

fn percent(x: f64) -> f64 {
    round1(x * 100.0)
}

fn scores(report: &EvalReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if let Some(b) = &report.bleu {
        for (name, v) in [
            ("BLEU-1", b.bleu1),
            ("BLEU-2", b.bleu2),
            ("BLEU-3", b.bleu3),
            ("BLEU-4", b.bleu4),
            ("BLEU-avg", b.bleu_avg),
        ] {
            out.push((name.to_string(), v));
        }
    }
    if let Some(t) = &report.top1 {
        for c in &t.categories {
            if let Some(acc) = c.accuracy {
                out.push((c.category.clone(), percent(acc)));
            }
        }
        out.push(("Top-1".to_string(), percent(t.overall)));
    }
    out
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(e).context(format!("{}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(e).context(format!("{}", path.display())))
}

fn run_info(s: &RunSummary) -> RunInfo {
    RunInfo {
        steps_completed: s.steps_completed,
        total_steps: s.total_steps,
        alerts_raised: s.alerts_raised,
        final_checkpoint: s.final_checkpoint.clone(),
    }
}

/// Reads a run directory (eval report and/or run summary) or a single
/// `eval_report.json`.
pub fn load_row(input: &Path, label: Option<String>) -> Result<Row, Failure> {
    let (eval_path, summary_path, default_label) = if input.is_dir() {
        let name = input
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| input.display().to_string());
        (input.join(EVAL_REPORT), input.join(RUN_SUMMARY), name)
    } else {
        let dir = input.parent().unwrap_or(Path::new("."));
        let name = dir
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| input.display().to_string());
        (input.to_path_buf(), dir.join(RUN_SUMMARY), name)
    };
    let eval: Option<EvalReport> = if eval_path.is_file() {
        Some(read_json(&eval_path)?)
    } else {
        None
    };
    let run: Option<SummaryFile> = if summary_path.is_file() {
        Some(read_json(&summary_path)?)
    } else {
        None
    };
    if eval.is_none() && run.is_none() {
        return Err(Failure::data(anyhow::anyhow!(
            "{} holds neither {EVAL_REPORT} nor {RUN_SUMMARY}",
            input.display()
        )));
    }
    if let Some(e) = &eval {
        e.check_invariants()
            .map_err(|m| Failure::data(anyhow::anyhow!("{}: {m}", eval_path.display())))?;
    }
    Ok(Row {
        label: label.unwrap_or(default_label),
        source: input.to_path_buf(),
        protocol: eval.as_ref().map(|e| e.protocol.clone()),
        run: run.as_ref().map(|r| run_info(&r.summary)),
        scores: eval.as_ref().map(scores).unwrap_or_default(),
    })
}

/// Marks the highest value in a column best and the next distinct value
/// second best. Ties share the flag. Nothing is marked unless at least two
/// rows carry the column.
fn flag(values: &[Option<f64>]) -> Vec<(bool, bool)> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() < 2 {
        return vec![(false, false); values.len()];
    }
    let best = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let second = present
        .iter()
        .copied()
        .filter(|&v| v < best)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    values
        .iter()
        .map(|v| match v {
            Some(v) => (*v == best, Some(*v) == second),
            None => (false, false),
        })
        .collect()
}

impl Table {
    pub fn build(rows: Vec<Row>) -> Self {
        let mut columns: Vec<String> = Vec::new();
        for r in &rows {
            for (c, _) in &r.scores {
                if !columns.contains(c) {
                    columns.push(c.clone());
                }
            }
        }
        let grid: Vec<Vec<Option<f64>>> = rows
            .iter()
            .map(|r| {
                columns
                    .iter()
                    .map(|c| r.scores.iter().find(|(n, _)| n == c).map(|(_, v)| *v))
                    .collect()
            })
            .collect();
        let flags: Vec<Vec<(bool, bool)>> = (0..columns.len())
            .map(|j| flag(&grid.iter().map(|row| row[j]).collect::<Vec<_>>()))
            .collect();
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| TableRow {
                cells: (0..columns.len())
                    .map(|j| Cell {
                        value: grid[i][j],
                        best: flags[j][i].0,
                        second_best: flags[j][i].1,
                    })
                    .collect(),
                label: r.label,
                source: r.source,
                protocol: r.protocol,
                run: r.run,
            })
            .collect();
        Self { columns, rows }
    }

    /// Plain-text table; `*` marks best, `+` second best.
    pub fn render(&self) -> String {
        let mut header = vec!["run".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("steps".into());
        header.push("alerts".into());
        let mut lines: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut line = vec![r.label.clone()];
            for c in &r.cells {
                line.push(match c.value {
                    Some(v) => {
                        let mark = if c.best {
                            "*"
                        } else if c.second_best {
                            "+"
                        } else {
                            ""
                        };
                        format!("{v:.1}{mark}")
                    }
                    None => "-".into(),
                });
            }
            match &r.run {
                Some(run) => {
                    line.push(format!("{}/{}", run.steps_completed, run.total_steps));
                    line.push(run.alerts_raised.to_string());
                }
                None => line.extend(["-".to_string(), "-".to_string()]),
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, w))| if j == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        if self.rows.len() > 1 {
            out.push_str("* best  + second best\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, avg: f64) -> Row {
        Row {
            label: label.into(),
            source: PathBuf::from(label),
            protocol: Some("robovqa-bleu".into()),
            run: None,
            scores: vec![("BLEU-avg".into(), avg)],
        }
    }

    #[test]
    fn higher_avg_is_best() {
        let t = Table::build(vec![row("a", 63.5), row("b", 62.7)]);
        assert!(t.rows[0].cells[0].best);
        assert!(t.rows[1].cells[0].second_best);
        assert!(!t.rows[1].cells[0].best);
    }

    #[test]
    fn ties_share_best() {
        let t = Table::build(vec![row("a", 50.0), row("b", 50.0), row("c", 40.0)]);
        assert!(t.rows[0].cells[0].best && t.rows[1].cells[0].best);
        assert!(t.rows[2].cells[0].second_best);
    }

    #[test]
    fn single_row_has_no_flags() {
        let t = Table::build(vec![row("a", 50.0)]);
        assert!(!t.rows[0].cells[0].best);
        assert_eq!(t.render().lines().count(), 3);
    }

    #[test]
    fn missing_columns_render_as_dash() {
        let mut b = row("b", 1.0);
        b.scores = vec![("Top-1".into(), 30.0)];
        let t = Table::build(vec![row("a", 50.0), b]);
        assert_eq!(t.columns, vec!["BLEU-avg", "Top-1"]);
        assert_eq!(t.rows[1].cells[0].value, None);
        assert!(!t.rows[1].cells[1].best);
        assert!(t.render().contains('-'));
    }
}
