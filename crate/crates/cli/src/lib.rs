//! Subcommand implementations behind the `mcfl` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mcfl_core::experiment::{run_repeats, FinalMetrics};
use mcfl_core::fesem::select_k;
use mcfl_core::report::{self, ComparisonRow, SweepRow};
use mcfl_core::{parse_config, AlgorithmKind, ExperimentConfig, Summary};

/// A parsed config plus the directory its relative data paths resolve against.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

pub fn load(path: &Path, seed: Option<u64>) -> Result<Loaded> {
    let mut config = parse_config(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        config.hyper.seed = s;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

fn out_dir(out: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone())
}

/// Runs every repeat and writes `metrics.csv` and `summary.json`.
pub fn cmd_run(loaded: &Loaded, out: Option<&Path>) -> Result<Summary> {
    let dir = out_dir(out, &loaded.config);
    let logs = run_repeats(&loaded.config, &loaded.base)?;
    let summary = report::write_run(&dir, &logs).with_context(|| format!("writing results to {}", dir.display()))?;
    Ok(summary)
}

pub struct SweepOptions {
    pub candidates: Vec<usize>,
    /// Devices in the probe subsample; `None` uses all of them.
    pub sample_size: Option<usize>,
    pub probe_rounds: usize,
    /// Also run the full experiment at the chosen `K`.
    pub run: bool,
}

/// Probes each candidate `K`, writes `sweep.csv`, and returns the chosen `K`.
pub fn cmd_sweep_k(loaded: &Loaded, opts: &SweepOptions, out: Option<&Path>) -> Result<usize> {
    let config = &loaded.config;
    ensure!(config.algorithm == AlgorithmKind::Fesem, "sweep-k needs a fesem config, got {}", config.algorithm);
    let seed = config.hyper.seed;
    let dataset = config.data.build(seed, &loaded.base)?;
    let m = dataset.m();
    if let Some(&k) = opts.candidates.iter().find(|&&k| k == 0 || k > m) {
        bail!("candidate K={k} must lie in 1..={m}");
    }
    let sample = opts.sample_size.unwrap_or(m);
    let report = select_k(&dataset, &config.arch, &opts.candidates, sample, opts.probe_rounds, &config.hyper, seed)?;

    let dir = out_dir(out, config);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows: Vec<SweepRow> = report
        .scores
        .iter()
        .map(|&(k, acc)| SweepRow { k, probe_macro_acc: acc, chosen: k == report.chosen })
        .collect();
    report::write_csv(&dir.join(report::SWEEP_FILE), &rows)?;

    if opts.run {
        let mut chosen = config.clone();
        chosen.hyper.k = report.chosen;
        let logs = run_repeats(&chosen, &loaded.base)?;
        report::write_run(&dir, &logs)?;
    }
    Ok(report.chosen)
}

/// Runs each config on the same data and seeds and writes `comparison.csv`.
pub fn cmd_compare(configs: &[Loaded], out: Option<&Path>) -> Result<Vec<ComparisonRow>> {
    ensure!(configs.len() >= 2, "compare needs at least two configs");
    let first = &configs[0].config;
    for (i, c) in configs.iter().enumerate().skip(1) {
        let c = &c.config;
        ensure!(c.data == first.data, "config {} uses different data settings than config 1", i + 1);
        ensure!(c.seeds() == first.seeds(), "config {} uses different seeds than config 1", i + 1);
    }
    let mut rows = Vec::with_capacity(configs.len());
    for loaded in configs {
        let logs = run_repeats(&loaded.config, &loaded.base)?;
        let finals: Vec<FinalMetrics> = logs.iter().map(|l| FinalMetrics::of(l.last())).collect();
        rows.push(ComparisonRow::new(loaded.config.algorithm.as_str(), logs.len(), &FinalMetrics::mean(&finals)));
    }
    let dir = out_dir(out, first);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    report::write_csv(&dir.join(report::COMPARISON_FILE), &rows)?;
    Ok(rows)
}
