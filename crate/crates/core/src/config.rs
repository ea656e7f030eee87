//! JSON experiment configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{FedAvg, FedDist, FedProx, FedSgd, HypoCluster, NoFed};
use crate::data::{self, FederatedDataset, SynthSpec};
use crate::engine::{AlgorithmHandle, HyperParams};
use crate::error::{Error, Result};
use crate::fesem::FeSem;
use crate::nn::ModelArch;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    Nofed,
    Fedsgd,
    Fedavg,
    Fedprox,
    Feddist,
    Feddws,
    Hypocluster,
    Fesem,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 8] = [
        AlgorithmKind::Nofed,
        AlgorithmKind::Fedsgd,
        AlgorithmKind::Fedavg,
        AlgorithmKind::Fedprox,
        AlgorithmKind::Feddist,
        AlgorithmKind::Feddws,
        AlgorithmKind::Hypocluster,
        AlgorithmKind::Fesem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::Nofed => "nofed",
            AlgorithmKind::Fedsgd => "fedsgd",
            AlgorithmKind::Fedavg => "fedavg",
            AlgorithmKind::Fedprox => "fedprox",
            AlgorithmKind::Feddist => "feddist",
            AlgorithmKind::Feddws => "feddws",
            AlgorithmKind::Hypocluster => "hypocluster",
            AlgorithmKind::Fesem => "fesem",
        }
    }

    pub fn is_clustered(self) -> bool {
        matches!(self, AlgorithmKind::Hypocluster | AlgorithmKind::Fesem)
    }

    pub fn build(self, arch: &ModelArch) -> AlgorithmHandle {
        match self {
            AlgorithmKind::Nofed => Box::new(NoFed),
            AlgorithmKind::Fedsgd => Box::new(FedSgd::new()),
            AlgorithmKind::Fedavg => Box::new(FedAvg::new()),
            AlgorithmKind::Fedprox => Box::new(FedProx::new()),
            AlgorithmKind::Feddist => Box::new(FedDist::new(false)),
            AlgorithmKind::Feddws => Box::new(FedDist::new(true)),
            AlgorithmKind::Hypocluster => Box::new(HypoCluster::new(arch.clone())),
            AlgorithmKind::Fesem => Box::new(FeSem::new()),
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("algorithm", format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub m: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "data::default_train_ratio")]
    pub train_ratio: f64,
    /// Use only the first `limit` samples of the files.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_alpha() -> f64 {
    0.5
}

/// Exactly one data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SynthSpec),
    Idx(IdxSpec),
}

impl DataSpec {
    /// Builds the federated dataset. Paths resolve against `base`.
    pub fn build(&self, seed: u64, base: &Path) -> Result<FederatedDataset> {
        let data_seed = rng::derive_seed(seed, &[tag::DATA]);
        match self {
            DataSpec::Synthetic(s) => data::synth_mixture(s, data_seed),
            DataSpec::Idx(s) => {
                let (mut x, mut y) = data::load_idx(base.join(&s.images), base.join(&s.labels))?;
                if let Some(limit) = s.limit.filter(|&l| l < y.len()) {
                    let idx: Vec<usize> = (0..limit).collect();
                    x = x.select_rows(&idx);
                    y.truncate(limit);
                }
                data::dirichlet_partition(&x, &y, s.m, s.alpha, s.train_ratio, data_seed)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataSpec::Synthetic(s) => s.validate(),
            DataSpec::Idx(s) => {
                if s.m == 0 {
                    return Err(Error::config("data.idx.m", "must be at least 1"));
                }
                if !(s.alpha > 0.0 && s.alpha.is_finite()) {
                    return Err(Error::config("data.idx.alpha", "must be positive"));
                }
                if !(s.train_ratio > 0.0 && s.train_ratio <= 1.0) {
                    return Err(Error::config("data.idx.train_ratio", "must lie in (0, 1]"));
                }
                Ok(())
            }
        }
    }

    fn device_count(&self) -> usize {
        match self {
            DataSpec::Synthetic(s) => s.m,
            DataSpec::Idx(s) => s.m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmKind,
    pub data: DataSpec,
    pub arch: ModelArch,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Worker threads for client execution; does not affect results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_repeats() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(algorithm: AlgorithmKind, data: DataSpec, arch: ModelArch, hyper: HyperParams) -> Self {
        ExperimentConfig {
            algorithm,
            data,
            arch,
            hyper,
            output_dir: default_output_dir(),
            repeats: default_repeats(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch
            .validate()
            .map_err(|e| Error::config("arch.layer_sizes", e.to_string()))?;
        self.data.validate()?;
        self.hyper.validate()?;
        if let DataSpec::Synthetic(s) = &self.data {
            if self.arch.input_dim() != s.input_dim {
                return Err(Error::config("arch.layer_sizes", format!("first size must equal input_dim {}", s.input_dim)));
            }
            if self.arch.classes() != s.classes {
                return Err(Error::config("arch.layer_sizes", format!("last size must equal classes {}", s.classes)));
            }
        }
        if self.algorithm.is_clustered() && self.hyper.k > self.data.device_count() {
            return Err(Error::config("hyper.k", "must not exceed the device count"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1 when set"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.hyper.seed.wrapping_add(r)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.starts_with("unknown field") || msg.starts_with("unknown variant") {
                Error::UnknownField(msg)
            } else {
                Error::ConfigSyntax(e)
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads and validates a JSON config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "algorithm": "fesem",
        "data": {"synthetic": {"m": 4, "k_true": 2, "per_device": 10, "input_dim": 3, "classes": 2}},
        "arch": {"layer_sizes": [3, 2]},
        "hyper": {"k": 2}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.hyper.participation, 1.0);
        assert_eq!(c.hyper.local_steps, 1);
        assert_eq!(c.hyper.beta, 1.0);
        assert_eq!(c.hyper.mu, 0.1);
        assert_eq!(c.hyper.init_restarts, 20);
        assert!(c.hyper.weight_local_loss);
        assert_eq!(c.repeats, 1);
    }

    #[test]
    fn zero_k_names_the_field() {
        let text = MINIMAL.replace(r#""k": 2"#, r#""k": 0"#);
        match ExperimentConfig::from_json(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "hyper.k"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_its_own_error() {
        let text = MINIMAL.replace(r#""k": 2"#, r#""k": 2, "kappa": 1"#);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::UnknownField(_))));
        assert!(matches!(ExperimentConfig::from_json("{"), Err(Error::ConfigSyntax(_))));
        assert!(matches!(parse_config("/definitely/missing.json"), Err(Error::Io { .. })));
    }

    #[test]
    fn arch_must_match_synthetic_dims() {
        let text = MINIMAL.replace("[3, 2]", "[4, 2]");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn emit_then_parse_round_trips() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn algorithm_names_parse() {
        for k in AlgorithmKind::ALL {
            assert_eq!(k.as_str().parse::<AlgorithmKind>().unwrap(), k);
        }
        assert!("fedfoo".parse::<AlgorithmKind>().is_err());
    }
}
