//! Per-fold metrics, fold summaries, and their text/JSONL renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One C-index measurement: a test scenario on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: String,
    pub fold: usize,
    pub cindex: f64,
    pub n_test: usize,
    pub seed: u64,
    /// Training missing rates as `pathology/genomics` percent.
    pub combo: String,
}

/// Final losses of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    pub combo: String,
    pub fold: usize,
    pub seed: u64,
    pub stage1_pathology: f64,
    pub stage1_genomics: f64,
    pub stage2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub combo: String,
    pub scenario: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<MetricRecord>,
    pub losses: Vec<StageLosses>,
    pub wall_clock_secs: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    /// One JSON object per line, in record order. Contains no timing, so
    /// repeated runs with the same seeds produce identical bytes.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Into::into))
            .collect()
    }

    /// Mean ± std over folds (and seeds) per combo and scenario, in first-seen order.
    pub fn summaries(&self) -> Vec<Summary> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.records {
            let key = (r.combo.clone(), r.scenario.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(combo, scenario)| {
                let values: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.combo == combo && r.scenario == scenario)
                    .map(|r| r.cindex)
                    .collect();
                let (mean, std) = mean_std(&values);
                Summary {
                    combo,
                    scenario,
                    mean,
                    std,
                    n: values.len(),
                }
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:<16} {:>8} {:>8} {:>4}", "combo", "scenario", "mean", "std", "n");
        for s in self.summaries() {
            let _ = writeln!(
                out,
                "{:<10} {:<16} {:>8.4} {:>8.4} {:>4}",
                s.combo, s.scenario, s.mean, s.std, s.n
            );
        }
        if !self.losses.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<10} {:>4} {:>6} {:>10} {:>10} {:>10}", "combo", "fold", "seed", "stage1 p", "stage1 g", "stage2");
            for l in &self.losses {
                let _ = writeln!(
                    out,
                    "{:<10} {:>4} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                    l.combo, l.fold, l.seed, l.stage1_pathology, l.stage1_genomics, l.stage2
                );
            }
        }
        let _ = writeln!(out, "\nwall clock: {:.1}s", self.wall_clock_secs);
        out
    }
}
