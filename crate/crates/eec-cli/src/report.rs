//! Structured result records (newline-delimited JSON) and plain-text
//! tables. Undefined metrics serialize as `null` and print as `-`.

use std::fmt::Write as _;
use std::path::Path;

use eec_core::metrics::MetricSummary;
use serde::Serialize;

use crate::formats;

/// One metrics row: an experiment over one policy / capacity / stream
/// combination. Fields that do not apply to the experiment are null.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub policy: Option<String>,
    pub memory: Option<usize>,
    pub frames: Option<u32>,
    pub evaluated_frames: usize,
    pub mean_iou: Option<f64>,
    pub mean_le: Option<f64>,
    pub mean_ca: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub association_accuracy: Option<f64>,
    pub undefined_iou: usize,
    pub undefined_le: usize,
    pub undefined_ca: usize,
    pub wall_ms: u64,
}

impl ResultRow {
    pub fn from_summary(
        experiment: &str,
        policy: Option<&str>,
        memory: Option<usize>,
        frames: Option<u32>,
        summary: &MetricSummary,
        wall_ms: u64,
    ) -> Self {
        ResultRow {
            experiment: experiment.to_string(),
            policy: policy.map(str::to_string),
            memory,
            frames,
            evaluated_frames: summary.frames,
            mean_iou: summary.mean_iou,
            mean_le: summary.mean_le,
            mean_ca: summary.mean_ca,
            balanced_accuracy: summary.balanced_accuracy,
            association_accuracy: summary.association_accuracy,
            undefined_iou: summary.frames - summary.iou_frames,
            undefined_le: summary.frames - summary.le_frames,
            undefined_ca: summary.frames - summary.ca_frames,
            wall_ms,
        }
    }
}

/// One toy-training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRow {
    pub experiment: String,
    pub seed: u64,
    pub task: String,
    pub steps: usize,
    pub learning_rate: f64,
    pub final_mse: f64,
    pub simple_add_mse: f64,
    pub mem_only_mse: f64,
    pub view_only_mse: f64,
    pub wall_ms: u64,
}

/// One gradient-check parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GradRow {
    pub experiment: String,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub group: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub wall_ms: u64,
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> serde_json::Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> anyhow::Result<()> {
    let text = to_jsonl(rows)?;
    formats::atomic_write(path, text.as_bytes())?;
    Ok(())
}

/// Minimal fixed-width table renderer: left-aligned first column,
/// right-aligned everything else.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Table { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) {
        let cells: Vec<String> = cells.into_iter().map(Into::into).collect();
        assert_eq!(cells.len(), self.headers.len(), "row width mismatch");
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for row in &self.rows {
            for (k, cell) in row.iter().enumerate() {
                widths[k] = widths[k].max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            for (k, cell) in cells.iter().enumerate() {
                if k > 0 {
                    out.push_str("  ");
                }
                if k == 0 {
                    let _ = write!(out, "{:<width$}", cell, width = widths[k]);
                } else {
                    let _ = write!(out, "{:>width$}", cell, width = widths[k]);
                }
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        };
        line(&self.headers, &mut out);
        let rule: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &self.rows {
            line(row, &mut out);
        }
        out
    }
}

pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}
