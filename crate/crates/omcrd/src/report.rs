//! Fixed-width result tables and their JSON counterpart.

use std::fmt::Write;

use omcrd_core::metrics::{CompressionReport, FoldSummary};
use omcrd_core::FoldResult;
use serde::{Deserialize, Serialize};

use crate::error::Result;

const NAME_WIDTH: usize = 24;
const COL_WIDTH: usize = 8;

/// Accuracies of one method, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub folds: Vec<f64>,
    pub mean: f64,
}

impl MethodRow {
    pub fn from_results(name: &str, results: &[FoldResult]) -> Result<Self> {
        let s = omcrd_core::metrics::aggregate_folds(results)?;
        Ok(Self::from_summary(name, &s))
    }

    pub fn from_summary(name: &str, s: &FoldSummary) -> Self {
        Self {
            name: name.to_string(),
            folds: s.per_fold.iter().map(|a| 100.0 * a).collect(),
            mean: 100.0 * s.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: String,
    pub methods: Vec<MethodRow>,
    #[serde(default)]
    pub compression: Option<CompressionReport>,
    #[serde(default)]
    pub ablations: Vec<MethodRow>,
}

/// Accuracy of the best peer for each peer count, next to the independent
/// baseline with the same number of peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub peers: usize,
    pub omcrd: MethodRow,
    pub baseline: Option<MethodRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: String,
    pub rows: Vec<SweepRow>,
}

fn header(out: &mut String, title: &str, folds: usize) {
    let _ = write!(out, "{:<w$}", title, w = NAME_WIDTH);
    for f in 1..=folds {
        let _ = write!(out, "{:>w$}", format!("Fold{}", f), w = COL_WIDTH);
    }
    let _ = writeln!(out, "{:>w$}", "Avg", w = COL_WIDTH);
}

fn row(out: &mut String, name: &str, values: &[f64], folds: usize, mean: f64) {
    let _ = write!(out, "{:<w$}", name, w = NAME_WIDTH);
    for f in 0..folds {
        match values.get(f) {
            Some(v) => {
                let _ = write!(out, "{:>w$.2}", v, w = COL_WIDTH);
            }
            None => {
                let _ = write!(out, "{:>w$}", "-", w = COL_WIDTH);
            }
        }
    }
    let _ = writeln!(out, "{:>w$.2}", mean, w = COL_WIDTH);
}

fn table(out: &mut String, title: &str, rows: &[MethodRow]) {
    let folds = rows.iter().map(|r| r.folds.len()).max().unwrap_or(0);
    header(out, title, folds);
    for r in rows {
        row(out, &r.name, &r.folds, folds, r.mean);
    }
}

pub fn render_report(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Cross-subject accuracy (%), task {}", report.task);
    table(&mut out, "Method", &report.methods);
    let _ = writeln!(out, "Peer selection uses held-out test accuracy; scores are optimistic.");
    if let Some(c) = &report.compression {
        let _ = writeln!(out);
        let _ = writeln!(out, "Model cost (M = {})", c.peers);
        let _ = writeln!(
            out,
            "{:<w$}{:>12}{:>12}{:>12}",
            "Phase",
            "Param.(K)",
            "MACs(M)",
            "FLOPs(M)",
            w = NAME_WIDTH
        );
        for (name, p, m, f) in [
            ("Training", c.train_params, c.macs_train, c.flops_train),
            ("Inference", c.infer_params, c.macs_infer, c.flops_infer),
        ] {
            let _ = writeln!(
                out,
                "{:<w$}{:>12.2}{:>12.2}{:>12.2}",
                name,
                p as f64 / 1e3,
                m as f64 / 1e6,
                f as f64 / 1e6,
                w = NAME_WIDTH
            );
        }
        let _ = writeln!(out, "{:<w$}{:>11.2}%", "Compress", 100.0 * c.compression_ratio, w = NAME_WIDTH);
    }
    if !report.ablations.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "Loss-term ablation (%)");
        table(&mut out, "Variant", &report.ablations);
    }
    out
}

pub fn render_sweep(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Accuracy (%) by number of peers, task {}", report.task);
    let folds = report
        .rows
        .iter()
        .flat_map(|r| core::iter::once(&r.omcrd).chain(&r.baseline))
        .map(|m| m.folds.len())
        .max()
        .unwrap_or(0);
    header(&mut out, "Peers", folds);
    for r in &report.rows {
        row(
            &mut out,
            &format!("M={} {}", r.peers, r.omcrd.name),
            &r.omcrd.folds,
            folds,
            r.omcrd.mean,
        );
        if let Some(b) = &r.baseline {
            row(&mut out, &format!("M={} {}", r.peers, b.name), &b.folds, folds, b.mean);
        }
    }
    out
}
