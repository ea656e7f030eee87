//! Deterministic simulator for multi-center federated learning.
//!
//! Client models are clustered in parameter space and aggregated per
//! cluster (FeSEM), alongside single-center baselines (FedSGD, FedAvg,
//! FedProx, FedDist/FedDWS), hypothesis-based clustering, and purely local
//! training. Every run is a pure function of its config and seed.

pub mod baselines;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod fesem;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;

pub use config::{parse_config, AlgorithmKind, DataSpec, ExperimentConfig, IdxSpec};
pub use data::{DeviceData, FederatedDataset, SynthSpec};
pub use engine::{AlgorithmHandle, ClientState, FederatedAlgorithm, HyperParams, RoundContext, RoundLog};
pub use error::{Error, Result};
pub use experiment::{run_experiment, MetricsLog, Summary};
pub use fesem::{ClusterState, FeSem, SelectKReport};
pub use nn::{Activation, Batch, Matrix, ModelArch, ModelParams};
