//! Method-vs-SDRi comparison tables built from evaluation summaries, and
//! side-by-side loss traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::METRIC_LABEL;
use crate::trainer::{EpochRecord, EvalSummary};

pub const IRM_METHOD: &str = "IRM (oracle)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub sdri_db: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: String,
    /// Sorted by SDRi, best first.
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    /// One row per summary, plus a single oracle-mask row when any summary
    /// carries one.
    pub fn from_summaries(summaries: &[EvalSummary]) -> Self {
        let mut rows: Vec<TableRow> = summaries
            .iter()
            .map(|s| TableRow {
                method: s.method.clone(),
                sdri_db: s.mean_sdri,
                count: s.count,
            })
            .collect();
        if let Some(s) = summaries.iter().find(|s| s.oracle_irm_mean_sdri.is_some()) {
            rows.push(TableRow {
                method: IRM_METHOD.into(),
                sdri_db: s.oracle_irm_mean_sdri.expect("checked"),
                count: s.count,
            });
        }
        rows.sort_by(|a, b| {
            b.sdri_db
                .total_cmp(&a.sdri_db)
                .then_with(|| a.method.cmp(&b.method))
        });
        let metric = summaries
            .first()
            .map_or(METRIC_LABEL.to_string(), |s| s.metric.clone());
        Self { metric, rows }
    }

    pub fn to_text(&self) -> String {
        let head = format!("{} (dB)", self.metric);
        let w = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(["Method".len()])
            .max()
            .unwrap_or(6);
        let mut out = format!("{:<w$} | {head}\n{}-+-{}\n", "Method", "-".repeat(w), "-".repeat(head.len()));
        for r in &self.rows {
            let _ = writeln!(out, "{:<w$} | {:>hw$.2}", r.method, r.sdri_db, hw = head.len());
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Loss traces in adjacent columns, aligned by row position.
pub fn juxtapose_traces(traces: &[(&str, &[EpochRecord])]) -> String {
    let mut out = String::from("row");
    for (label, _) in traces {
        let _ = write!(out, " | {label}: step epoch train valid");
    }
    out.push('\n');
    let n = traces.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    for i in 0..n {
        let _ = write!(out, "{:>3}", i + 1);
        for (_, t) in traces {
            match t.get(i) {
                Some(r) => {
                    let _ = write!(
                        out,
                        " | {:>7} {:>3} {:>9.4} {:>9.4}",
                        r.step, r.epoch, r.train_loss, r.valid_loss
                    );
                }
                None => out.push_str(" |"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(method: &str, sdri: f64, irm: Option<f64>) -> EvalSummary {
        EvalSummary {
            method: method.into(),
            metric: METRIC_LABEL.into(),
            count: 10,
            mean_sdri: sdri,
            stage_means: vec![sdri],
            mean_mixture_si_sdr: -3.0,
            oracle_irm_mean_sdri: irm,
        }
    }

    #[test]
    fn rows_sorted_descending() {
        let t = ComparisonTable::from_summaries(&[summary("TasTas(6)", 3.0, None), summary("TasTas(I, 6, 6)", 4.5, None)]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].method, "TasTas(I, 6, 6)");
        let text = t.to_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("Method"));
        assert!(text.contains("SI-SDRi (dB)"));
        assert_eq!(ComparisonTable::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn oracle_row_added_once() {
        let t = ComparisonTable::from_summaries(&[
            summary("a", 1.0, Some(9.0)),
            summary("b", 2.0, Some(9.0)),
        ]);
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[0].method, IRM_METHOD);
    }

    #[test]
    fn traces_side_by_side() {
        let rec = |step: &str, epoch, v| EpochRecord {
            step: step.into(),
            epoch,
            train_loss: v,
            valid_loss: v,
            best_valid: v,
            lr: 1e-3,
        };
        let a = vec![rec("stage1", 1, 1.0), rec("stage1", 2, 0.5)];
        let b = vec![rec("naive", 1, 2.0)];
        let text = juxtapose_traces(&[("multistep", &a), ("naive", &b)]);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with('|'));
    }
}
