//! Round engine: local client updates, weighted aggregation, client
//! sampling, evaluation, and the multi-round simulation loop shared by
//! every algorithm.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DeviceData, FederatedDataset};
use crate::error::{check_len, Error, Result};
use crate::metrics;
use crate::nn::{self, Batch, ModelArch, ModelParams};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Weight of the distance term in the multi-center objective.
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    /// FedProx proximal coefficient.
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Local SGD steps per round.
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,
    /// Minibatch size; `None` means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    /// Number of cluster centers.
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::participation")]
    pub participation: f64,
    /// Scale each device's supervised gradient by its share of all training data.
    #[serde(default = "defaults::weight_local_loss")]
    pub weight_local_loss: bool,
    #[serde(default)]
    pub seed: u64,
    /// Server interpolation step for FedDist/FedDWS.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Random restarts of the k-means center initialization.
    #[serde(default = "defaults::init_restarts")]
    pub init_restarts: usize,
    /// Data-size weighted M-step instead of the plain mean.
    #[serde(default)]
    pub weighted_m_step: bool,
}

mod defaults {
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn mu() -> f64 {
        0.1
    }
    pub fn lr() -> f64 {
        0.1
    }
    pub fn local_steps() -> usize {
        1
    }
    pub fn rounds() -> usize {
        20
    }
    pub fn k() -> usize {
        1
    }
    pub fn participation() -> f64 {
        1.0
    }
    pub fn weight_local_loss() -> bool {
        true
    }
    pub fn beta() -> f64 {
        1.0
    }
    pub fn init_restarts() -> usize {
        20
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: defaults::lambda(),
            mu: defaults::mu(),
            lr: defaults::lr(),
            local_steps: defaults::local_steps(),
            batch_size: None,
            rounds: defaults::rounds(),
            k: defaults::k(),
            participation: defaults::participation(),
            weight_local_loss: defaults::weight_local_loss(),
            seed: 0,
            beta: defaults::beta(),
            init_restarts: defaults::init_restarts(),
            weighted_m_step: false,
        }
    }
}

impl HyperParams {
    /// Checks per-field ranges. Errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: &str| Err(Error::config(format!("hyper.{f}"), r));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err("lambda", "must be a finite value >= 0");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return err("mu", "must be a finite value >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", "must be > 0");
        }
        if self.local_steps == 0 {
            return err("local_steps", "must be >= 1");
        }
        if self.batch_size == Some(0) {
            return err("batch_size", "must be >= 1 when set");
        }
        if self.k == 0 {
            return err("k", "must be >= 1");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return err("participation", "must lie in (0, 1]");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return err("beta", "must lie in (0, 1]");
        }
        if self.init_restarts == 0 {
            return err("init_restarts", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub device_id: usize,
    pub data: DeviceData,
    pub model: ModelParams,
}

/// Round-invariant facts every local update needs.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub device_count: usize,
    pub total_train: usize,
    pub round: usize,
}

impl RoundContext {
    pub fn new(clients: &[ClientState], round: usize) -> Self {
        RoundContext {
            device_count: clients.len(),
            total_train: clients.iter().map(|c| c.data.train.len()).sum(),
            round,
        }
    }
}

/// Pull toward the starting point applied during local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    /// Gradient `(2 lambda / m) (W - center)`.
    Distance { lambda: f64, device_count: usize },
    /// Gradient `mu (W - center)`.
    Prox { mu: f64 },
}

impl Regularizer {
    fn coefficient(self) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::Distance { lambda, device_count } => 2.0 * lambda / device_count as f64,
            Regularizer::Prox { mu } => mu,
        }
    }
}

fn minibatch(client: &ClientState, hyper: &HyperParams, ctx: &RoundContext, step: usize) -> Option<Batch> {
    let train = &client.data.train;
    match hyper.batch_size {
        Some(b) if b < train.len() => {
            let mut r = rng::rng_for(
                hyper.seed,
                &[tag::MINIBATCH, ctx.round as u64, client.device_id as u64, step as u64],
            );
            let mut idx = index::sample(&mut r, train.len(), b).into_vec();
            idx.sort_unstable();
            Some(train.select(&idx))
        }
        _ => None,
    }
}

/// Starts from `start` and takes `local_steps` SGD steps on
/// `w * L_s + regularizer`, with `grad_fn` supplying the data gradient.
pub fn local_train_with<F>(
    client: &ClientState,
    start: &ModelParams,
    reg: Regularizer,
    ctx: &RoundContext,
    hyper: &HyperParams,
    grad_fn: F,
) -> Result<ModelParams>
where
    F: Fn(&ModelParams, &Batch) -> Result<Vec<f64>>,
{
    if start.arch.input_dim() != client.data.train.inputs.cols() {
        return Err(Error::DimensionMismatch {
            expected: client.data.train.inputs.cols(),
            actual: start.arch.input_dim(),
        });
    }
    let weight = if hyper.weight_local_loss {
        Some(client.data.train.len() as f64 / ctx.total_train.max(1) as f64)
    } else {
        None
    };
    let coef = reg.coefficient();
    let mut model = start.clone();
    for step in 0..hyper.local_steps {
        let batch = minibatch(client, hyper, ctx, step);
        let mut grad = grad_fn(&model, batch.as_ref().unwrap_or(&client.data.train))?;
        check_len(grad.len(), model.len())?;
        if let Some(w) = weight {
            grad.iter_mut().for_each(|g| *g *= w);
        }
        if coef != 0.0 {
            for ((g, w), c) in grad.iter_mut().zip(&model.values).zip(&start.values) {
                *g += coef * (w - c);
            }
        }
        model = nn::sgd_step(&model, &grad, hyper.lr)?;
    }
    if model.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local update"));
    }
    Ok(model)
}

pub fn local_train(
    client: &ClientState,
    start: &ModelParams,
    reg: Regularizer,
    ctx: &RoundContext,
    hyper: &HyperParams,
) -> Result<ModelParams> {
    local_train_with(client, start, reg, ctx, hyper, |m, b| {
        nn::supervised_loss_grad(m, b).map(|(_, g)| g)
    })
}

/// Client update from a center under the distance-constrained local loss.
pub fn local_update(
    client: &ClientState,
    center: &ModelParams,
    ctx: &RoundContext,
    hyper: &HyperParams,
) -> Result<ModelParams> {
    let reg = if hyper.lambda > 0.0 {
        Regularizer::Distance {
            lambda: hyper.lambda,
            device_count: ctx.device_count,
        }
    } else {
        Regularizer::None
    };
    local_train(client, center, reg, ctx, hyper)
}

/// `sum_i (w_i / sum w) * models_i`, accumulated in list order.
pub fn weighted_average(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = models.first().ok_or(Error::Empty("model list"))?;
    check_len(models.len(), weights.len())?;
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::invalid("weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::invalid("total weight is zero"));
    }
    let mut acc = vec![0.0; first.len()];
    for (m, &w) in models.iter().zip(weights) {
        check_len(m.len(), acc.len())?;
        let share = w / total;
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += share * v;
        }
    }
    Ok(first.with_values(acc))
}

/// Server-side behaviour of one federated algorithm.
pub trait FederatedAlgorithm: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether rounds produce a meaningful cluster assignment.
    fn is_clustered(&self) -> bool {
        false
    }

    /// Called once after round-0 evaluation, before the first round.
    fn initialize(&mut self, _clients: &mut [ClientState], _hyper: &HyperParams) -> Result<()> {
        Ok(())
    }

    /// Model scored on client `i`'s test set after a round.
    fn eval_model<'a>(&'a self, clients: &'a [ClientState], i: usize) -> &'a ModelParams {
        &clients[i].model
    }

    /// Runs one round. `selected` lists participating client indices in
    /// ascending order; client models are updated in place.
    fn round(
        &mut self,
        clients: &mut [ClientState],
        selected: &[usize],
        ctx: &RoundContext,
        hyper: &HyperParams,
    ) -> Result<RoundOutcome>;
}

pub type AlgorithmHandle = Box<dyn FederatedAlgorithm>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundOutcome {
    pub objective: Option<f64>,
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub per_device_acc: Vec<f64>,
    pub per_device_f1: Vec<f64>,
    /// Test-set sizes; devices with size 0 are left out of aggregates.
    pub device_sizes: Vec<usize>,
    pub objective: Option<f64>,
    pub assignment: Vec<usize>,
    pub ari: Option<f64>,
}

impl RoundLog {
    fn scored(&self, values: &[f64]) -> (Vec<f64>, Vec<usize>) {
        values
            .iter()
            .zip(&self.device_sizes)
            .filter(|(_, &s)| s > 0)
            .map(|(&v, &s)| (v, s))
            .unzip()
    }

    pub fn micro_acc(&self) -> f64 {
        let (v, s) = self.scored(&self.per_device_acc);
        metrics::micro_aggregate(&v, &s).unwrap_or(f64::NAN)
    }

    pub fn macro_acc(&self) -> f64 {
        let (v, _) = self.scored(&self.per_device_acc);
        metrics::macro_aggregate(&v).unwrap_or(f64::NAN)
    }

    pub fn micro_f1(&self) -> f64 {
        let (v, s) = self.scored(&self.per_device_f1);
        metrics::micro_aggregate(&v, &s).unwrap_or(f64::NAN)
    }

    pub fn macro_f1(&self) -> f64 {
        let (v, _) = self.scored(&self.per_device_f1);
        metrics::macro_aggregate(&v).unwrap_or(f64::NAN)
    }
}

/// Accuracy and F1 of `model` on the device's test split.
pub fn evaluate_device(model: &ModelParams, data: &DeviceData, classes: usize) -> Result<metrics::DeviceMetric> {
    let test = &data.test;
    if test.is_empty() {
        return Ok(metrics::DeviceMetric {
            device_id: data.device_id,
            accuracy: f64::NAN,
            f1: f64::NAN,
            test_size: 0,
        });
    }
    let preds = nn::predict(model, &test.inputs)?;
    Ok(metrics::DeviceMetric {
        device_id: data.device_id,
        accuracy: metrics::accuracy(&preds, &test.labels)?,
        f1: metrics::f1_score(&preds, &test.labels, classes)?,
        test_size: test.len(),
    })
}

fn evaluate<'a>(
    clients: &'a [ClientState],
    model_of: impl Fn(usize) -> &'a ModelParams + Sync,
    classes: usize,
    round: usize,
    outcome: RoundOutcome,
    truth: Option<&[usize]>,
) -> Result<RoundLog> {
    let scores = (0..clients.len())
        .into_par_iter()
        .map(|i| evaluate_device(model_of(i), &clients[i].data, classes))
        .collect::<Result<Vec<_>>>()?;
    let ari = match truth {
        Some(t) if !outcome.assignment.is_empty() => Some(metrics::adjusted_rand_index(&outcome.assignment, t)?),
        _ => None,
    };
    Ok(RoundLog {
        round,
        per_device_acc: scores.iter().map(|s| s.accuracy).collect(),
        per_device_f1: scores.iter().map(|s| s.f1).collect(),
        device_sizes: scores.iter().map(|s| s.test_size).collect(),
        objective: outcome.objective,
        assignment: outcome.assignment,
        ari,
    })
}

/// Deterministic choice of `ceil(participation * m)` clients, ascending.
pub fn sample_clients(m: usize, participation: f64, seed: u64, round: usize) -> Vec<usize> {
    let count = ((participation * m as f64).ceil() as usize).clamp(1, m);
    if count == m {
        return (0..m).collect();
    }
    let mut r = rng::rng_for(seed, &[tag::SAMPLE, round as u64]);
    let mut idx = index::sample(&mut r, m, count).into_vec();
    idx.sort_unstable();
    idx
}

/// One round: sample, delegate to the algorithm, evaluate every client.
pub fn run_round(
    clients: &mut [ClientState],
    algorithm: &mut dyn FederatedAlgorithm,
    hyper: &HyperParams,
    round: usize,
    classes: usize,
    truth: Option<&[usize]>,
) -> Result<RoundLog> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let selected = sample_clients(clients.len(), hyper.participation, hyper.seed, round);
    let ctx = RoundContext::new(clients, round);
    let outcome = algorithm.round(clients, &selected, &ctx, hyper)?;
    let truth = if algorithm.is_clustered() { truth } else { None };
    let algorithm = &*algorithm;
    evaluate(clients, |i| algorithm.eval_model(clients, i), classes, round, outcome, truth)
}

pub fn build_clients(dataset: &FederatedDataset, init: &ModelParams) -> Result<Vec<ClientState>> {
    if init.arch.input_dim() != dataset.input_dim {
        return Err(Error::DimensionMismatch {
            expected: dataset.input_dim,
            actual: init.arch.input_dim(),
        });
    }
    if init.arch.classes() < dataset.classes {
        return Err(Error::DimensionMismatch {
            expected: dataset.classes,
            actual: init.arch.classes(),
        });
    }
    if dataset.devices.is_empty() {
        return Err(Error::Empty("dataset devices"));
    }
    Ok(dataset
        .devices
        .iter()
        .map(|d| ClientState {
            device_id: d.device_id,
            data: d.clone(),
            model: init.clone(),
        })
        .collect())
}

/// Shared initial model for a run.
pub fn initial_model(arch: &ModelArch, seed: u64) -> ModelParams {
    nn::init_model(arch, rng::derive_seed(seed, &[tag::INIT]))
}

/// Runs round-0 evaluation, initialization, then `hyper.rounds` rounds.
pub fn simulate(
    dataset: &FederatedDataset,
    arch: &ModelArch,
    algorithm: &mut dyn FederatedAlgorithm,
    hyper: &HyperParams,
) -> Result<(Vec<RoundLog>, Vec<ClientState>)> {
    hyper.validate()?;
    let init = initial_model(arch, hyper.seed);
    let mut clients = build_clients(dataset, &init)?;
    let truth = dataset.true_clusters();
    let truth = truth.as_deref();
    let m = clients.len();

    let mut logs = Vec::with_capacity(hyper.rounds + 1);
    let round0 = RoundOutcome {
        objective: None,
        assignment: if algorithm.is_clustered() { vec![0; m] } else { Vec::new() },
    };
    logs.push(evaluate(&clients, |i| &clients[i].model, dataset.classes, 0, round0, None)?);
    if hyper.rounds == 0 {
        return Ok((logs, clients));
    }
    algorithm.initialize(&mut clients, hyper)?;
    for round in 1..=hyper.rounds {
        logs.push(run_round(&mut clients, algorithm, hyper, round, dataset.classes, truth)?);
    }
    Ok((logs, clients))
}
