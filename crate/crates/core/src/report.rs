//! Machine-readable run outputs and their readers.
//!
//! | file             | columns                                                                   |
//! |------------------|---------------------------------------------------------------------------|
//! | `metrics.csv`    | seed, round, micro_acc, macro_acc, micro_f1, macro_f1, objective, ari      |
//! | `sweep.csv`      | k, probe_macro_acc, chosen                                                 |
//! | `comparison.csv` | algorithm, seeds, micro_acc, macro_acc, micro_f1, macro_f1, ari            |
//!
//! Empty cells mean "not available" (no objective before round 1, no ARI
//! without ground truth or for unclustered algorithms).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{FinalMetrics, MetricsLog, Summary};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: usize,
    pub micro_acc: f64,
    pub macro_acc: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub objective: Option<f64>,
    pub ari: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub probe_macro_acc: f64,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub seeds: usize,
    pub micro_acc: f64,
    pub macro_acc: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub ari: Option<f64>,
}

impl ComparisonRow {
    pub fn new(algorithm: &str, seeds: usize, m: &FinalMetrics) -> Self {
        ComparisonRow {
            algorithm: algorithm.to_string(),
            seeds,
            micro_acc: m.micro_acc,
            macro_acc: m.macro_acc,
            micro_f1: m.micro_f1,
            macro_f1: m.macro_f1,
            ari: m.ari,
        }
    }
}

pub fn metrics_rows(logs: &[MetricsLog]) -> Vec<MetricsRow> {
    logs.iter()
        .flat_map(|log| {
            log.rounds.iter().map(move |r| MetricsRow {
                seed: log.seed,
                round: r.round,
                micro_acc: r.micro_acc(),
                macro_acc: r.macro_acc(),
                micro_f1: r.micro_f1(),
                macro_f1: r.macro_f1(),
                objective: r.objective,
                ari: r.ari,
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `metrics.csv` and `summary.json` into `dir`, creating it.
pub fn write_run(dir: &Path, logs: &[MetricsLog]) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join(METRICS_FILE), &metrics_rows(logs))?;
    let summary = Summary::from_logs(logs)?;
    write_summary(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
