//! Side-by-side scores of the three training regimes, plus the assembled model.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::metrics::{metric_names, MetricsReport};
use crate::schema::{TaskGroup, TaskId};
use crate::training::Regime;

/// Name of the predictions and metrics files of the assembled model.
pub const ASSEMBLED: &str = "crashchat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonRow {
    pub task: TaskId,
    pub metric: String,
    pub independent: Option<f64>,
    pub homogeneous: Option<f64>,
    pub heterogeneous: Option<f64>,
    /// Homogeneous minus independent.
    pub delta_homo_ind: Option<f64>,
    /// Heterogeneous minus independent.
    pub delta_hete_ind: Option<f64>,
    /// Heterogeneous minus homogeneous.
    pub delta_hete_homo: Option<f64>,
    pub assembled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Comparison {
    pub config_hash: String,
    pub rows: Vec<ComparisonRow>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

impl Comparison {
    /// `reports` is keyed by run slug (`ind-a`, `homo-lc`, `hete`, ...) and [`ASSEMBLED`].
    pub fn build(config_hash: &str, reports: &BTreeMap<String, MetricsReport>, ap_thresholds: &[f64]) -> Self {
        let lookup = |name: String, task: TaskId, metric: &str| reports.get(&name).and_then(|r| r.metric(task, metric));
        let mut rows = Vec::new();
        for task in TaskId::ALL {
            for metric in metric_names(task, ap_thresholds) {
                let ind = lookup(Regime::Independent { task }.slug(), task, &metric);
                let homo = lookup(Regime::Homogeneous { group: task.group() }.slug(), task, &metric);
                let hete = lookup(Regime::Heterogeneous.slug(), task, &metric);
                let assembled = lookup(ASSEMBLED.into(), task, &metric);
                if [ind, homo, hete, assembled].iter().all(Option::is_none) {
                    continue;
                }
                rows.push(ComparisonRow {
                    task,
                    metric,
                    independent: ind,
                    homogeneous: homo,
                    heterogeneous: hete,
                    delta_homo_ind: diff(homo, ind),
                    delta_hete_ind: diff(hete, ind),
                    delta_hete_homo: diff(hete, homo),
                    assembled,
                });
            }
        }
        Self { config_hash: config_hash.to_string(), rows }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable comparison") + "\n"
    }

    pub fn to_table(&self) -> String {
        let header = ["Group", "Task", "Metric", "Ind.", "Homo.", "Hete.", "D1", "D2", "D3", "CrashChat"];
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        // Differences that round to zero print as +0.0000 rather than -0.0000.
        let sfmt =
            |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:+.4}", if x.abs() < 5e-5 { 0.0 } else { x }));
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let group = match r.task.group() {
                TaskGroup::Lc => "Lc",
                TaskGroup::Pc => "Pc",
            };
            cells.push(vec![
                group.into(),
                r.task.name().into(),
                r.metric.clone(),
                fmt(r.independent),
                fmt(r.homogeneous),
                fmt(r.heterogeneous),
                sfmt(r.delta_homo_ind),
                sfmt(r.delta_hete_ind),
                sfmt(r.delta_hete_homo),
                fmt(r.assembled),
            ]);
        }
        let widths: Vec<usize> =
            (0..header.len()).map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.config_hash);
        for row in &cells {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                if c < 3 {
                    let _ = write!(line, "{cell:<w$}  ", w = widths[c]);
                } else {
                    let _ = write!(line, "{cell:>w$}  ", w = widths[c]);
                }
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out.push_str("D1 = Homo. - Ind., D2 = Hete. - Ind., D3 = Hete. - Homo.\n");
        out
    }
}
