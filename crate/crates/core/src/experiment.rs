//! Config-driven experiment execution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::FederatedDataset;
use crate::engine::{self, RoundLog};
use crate::error::{Error, Result};

/// All round logs of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: Vec<RoundLog>,
}

impl MetricsLog {
    pub fn last(&self) -> &RoundLog {
        self.rounds.last().expect("round 0 is always logged")
    }
}

/// Runs `f` on a dedicated pool with `workers` threads, or the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// One seeded run on an already-built dataset.
pub fn run_on_dataset(config: &ExperimentConfig, dataset: &FederatedDataset, seed: u64) -> Result<MetricsLog> {
    let hyper = engine::HyperParams {
        seed,
        ..config.hyper.clone()
    };
    let mut algorithm = config.algorithm.build(&config.arch);
    let (rounds, _) = with_workers(config.workers, || {
        engine::simulate(dataset, &config.arch, algorithm.as_mut(), &hyper)
    })??;
    Ok(MetricsLog {
        algorithm: config.algorithm.to_string(),
        seed,
        rounds,
    })
}

/// Builds the dataset for `seed` and runs the configured algorithm.
/// Relative data paths resolve against `base`.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, base: &Path) -> Result<MetricsLog> {
    config.validate()?;
    let dataset = config.data.build(seed, base)?;
    run_on_dataset(config, &dataset, seed)
}

/// Runs every configured repeat, seeds `hyper.seed, hyper.seed + 1, ...`.
pub fn run_repeats(config: &ExperimentConfig, base: &Path) -> Result<Vec<MetricsLog>> {
    config.seeds().into_iter().map(|s| run_experiment(config, s, base)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub micro_acc: f64,
    pub macro_acc: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

impl FinalMetrics {
    pub fn of(log: &RoundLog) -> Self {
        FinalMetrics {
            micro_acc: log.micro_acc(),
            macro_acc: log.macro_acc(),
            micro_f1: log.micro_f1(),
            macro_f1: log.macro_f1(),
            ari: log.ari,
        }
    }

    /// Field-wise mean; `ari` only when every run has one.
    pub fn mean(items: &[FinalMetrics]) -> Self {
        let n = items.len() as f64;
        let avg = |f: fn(&FinalMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let ari: Option<Vec<f64>> = items.iter().map(|m| m.ari).collect();
        FinalMetrics {
            micro_acc: avg(|m| m.micro_acc),
            macro_acc: avg(|m| m.macro_acc),
            micro_f1: avg(|m| m.micro_f1),
            macro_f1: avg(|m| m.macro_f1),
            ari: ari.map(|v| v.iter().sum::<f64>() / n),
        }
    }
}

/// Final-round means across seeds, plus the per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    #[serde(rename = "final")]
    pub final_mean: FinalMetrics,
    pub per_seed: Vec<FinalMetrics>,
}

impl Summary {
    pub fn from_logs(logs: &[MetricsLog]) -> Result<Self> {
        let first = logs.first().ok_or(Error::Empty("run logs"))?;
        let per_seed: Vec<FinalMetrics> = logs.iter().map(|l| FinalMetrics::of(l.last())).collect();
        Ok(Summary {
            algorithm: first.algorithm.clone(),
            seeds: logs.iter().map(|l| l.seed).collect(),
            rounds: first.last().round,
            final_mean: FinalMetrics::mean(&per_seed),
            per_seed,
        })
    }
}
