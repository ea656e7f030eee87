//! Comparison algorithms on the shared round engine.

use rayon::prelude::*;

use crate::engine::{
    self, local_train, ClientState, FederatedAlgorithm, HyperParams, Regularizer, RoundContext, RoundOutcome,
};
use crate::error::{check_len, Error, Result};
use crate::fesem::intra_cluster_objective;
use crate::nn::{self, ModelArch, ModelParams};
use crate::rng;

fn train_weights(clients: &[ClientState], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| clients[i].data.train.len() as f64).collect()
}

fn local_models(
    clients: &[ClientState],
    selected: &[usize],
    start: impl Fn(usize) -> ModelParams + Sync,
    reg: Regularizer,
    ctx: &RoundContext,
    hyper: &HyperParams,
) -> Result<Vec<ModelParams>> {
    selected
        .par_iter()
        .map(|&i| local_train(&clients[i], &start(i), reg, ctx, hyper))
        .collect()
}

fn broadcast(clients: &mut [ClientState], model: &ModelParams) {
    for c in clients {
        c.model = model.clone();
    }
}

fn spread(locals: &[ModelParams], center: &ModelParams) -> Result<f64> {
    let refs: Vec<&ModelParams> = locals.iter().collect();
    intra_cluster_objective(&refs, std::slice::from_ref(center), &vec![0; refs.len()])
}

/// One FedAvg round: local training from `global`, then the train-size
/// weighted average of the participants.
pub fn fedavg_round(
    clients: &[ClientState],
    selected: &[usize],
    global: &ModelParams,
    ctx: &RoundContext,
    hyper: &HyperParams,
) -> Result<(ModelParams, Vec<ModelParams>)> {
    let locals = local_models(clients, selected, |_| global.clone(), Regularizer::None, ctx, hyper)?;
    let refs: Vec<&ModelParams> = locals.iter().collect();
    let next = engine::weighted_average(&refs, &train_weights(clients, selected))?;
    Ok((next, locals))
}

/// FedProx local objective: data loss plus `(mu/2) ||W - global||^2`.
pub fn fedprox_local(client: &ClientState, global: &ModelParams, ctx: &RoundContext, hyper: &HyperParams) -> Result<ModelParams> {
    if hyper.mu.is_nan() || hyper.mu < 0.0 {
        return Err(Error::invalid("mu must be non-negative"));
    }
    let reg = if hyper.mu > 0.0 {
        Regularizer::Prox { mu: hyper.mu }
    } else {
        Regularizer::None
    };
    local_train(client, global, reg, ctx, hyper)
}

/// One FedSGD round: a single full-batch gradient per participant at
/// `global`, size-weighted on the server, one step.
pub fn fedsgd_round(clients: &[ClientState], selected: &[usize], global: &ModelParams, hyper: &HyperParams) -> Result<ModelParams> {
    let grads = selected
        .par_iter()
        .map(|&i| nn::supervised_loss_grad(global, &clients[i].data.train).map(|(_, g)| global.with_values(g)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ModelParams> = grads.iter().collect();
    let mean = engine::weighted_average(&refs, &train_weights(clients, selected))?;
    nn::sgd_step(global, &mean.values, hyper.lr)
}

/// Reptile-style server step `global + beta * (avg(locals) - global)`.
/// `weights` selects a weighted average (FedDWS); `None` is the plain mean.
pub fn feddist_update(locals: &[ModelParams], global: &ModelParams, beta: f64, weights: Option<&[f64]>) -> Result<ModelParams> {
    if locals.is_empty() {
        return Err(Error::Empty("local models"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("beta must lie in (0, 1]"));
    }
    let refs: Vec<&ModelParams> = locals.iter().collect();
    let uniform = vec![1.0; locals.len()];
    let target = engine::weighted_average(&refs, weights.unwrap_or(&uniform))?;
    check_len(target.len(), global.len())?;
    if beta == 1.0 {
        return Ok(target);
    }
    let values = global
        .values
        .iter()
        .zip(&target.values)
        .map(|(g, t)| g + beta * (t - g))
        .collect();
    Ok(global.with_values(values))
}

/// Index of the center with the lowest training loss on the client's data.
pub fn hypocluster_assign(client: &ClientState, centers: &[ModelParams]) -> Result<usize> {
    if centers.is_empty() {
        return Err(Error::Empty("centers"));
    }
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let loss = nn::supervised_loss(c, &client.data.train)?;
        if loss < best_loss {
            best = k;
            best_loss = loss;
        }
    }
    Ok(best)
}

/// Local training only: `rounds * local_steps` SGD steps per client from
/// its current model, never aggregated.
pub fn nofed_train(clients: &[ClientState], hyper: &HyperParams) -> Result<Vec<ModelParams>> {
    let mut models: Vec<ModelParams> = clients.iter().map(|c| c.model.clone()).collect();
    let all: Vec<usize> = (0..clients.len()).collect();
    for round in 1..=hyper.rounds {
        let ctx = RoundContext::new(clients, round);
        models = local_models(clients, &all, |i| models[i].clone(), Regularizer::None, &ctx, hyper)?;
    }
    Ok(models)
}

#[derive(Debug)]
pub struct FedAvg {
    global: Option<ModelParams>,
}

impl FedAvg {
    pub fn new() -> Self {
        FedAvg { global: None }
    }
}

impl Default for FedAvg {
    fn default() -> Self {
        Self::new()
    }
}

/// Either FedAvg (`mu = 0` path) or FedProx local training.
#[derive(Debug)]
pub struct FedProx {
    global: Option<ModelParams>,
}

impl FedProx {
    pub fn new() -> Self {
        FedProx { global: None }
    }
}

impl Default for FedProx {
    fn default() -> Self {
        Self::new()
    }
}

fn take_global(slot: &mut Option<ModelParams>, clients: &[ClientState]) -> Result<ModelParams> {
    match slot.take() {
        Some(g) => Ok(g),
        None => clients.first().map(|c| c.model.clone()).ok_or(Error::Empty("client list")),
    }
}

impl FederatedAlgorithm for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn round(&mut self, clients: &mut [ClientState], selected: &[usize], ctx: &RoundContext, hyper: &HyperParams) -> Result<RoundOutcome> {
        let global = take_global(&mut self.global, clients)?;
        let (next, locals) = fedavg_round(clients, selected, &global, ctx, hyper)?;
        let objective = spread(&locals, &next)?;
        broadcast(clients, &next);
        self.global = Some(next);
        Ok(RoundOutcome { objective: Some(objective), assignment: Vec::new() })
    }
}

impl FederatedAlgorithm for FedProx {
    fn name(&self) -> &'static str {
        "fedprox"
    }

    fn round(&mut self, clients: &mut [ClientState], selected: &[usize], ctx: &RoundContext, hyper: &HyperParams) -> Result<RoundOutcome> {
        let global = take_global(&mut self.global, clients)?;
        let locals = selected
            .par_iter()
            .map(|&i| fedprox_local(&clients[i], &global, ctx, hyper))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ModelParams> = locals.iter().collect();
        let next = engine::weighted_average(&refs, &train_weights(clients, selected))?;
        let objective = spread(&locals, &next)?;
        broadcast(clients, &next);
        self.global = Some(next);
        Ok(RoundOutcome { objective: Some(objective), assignment: Vec::new() })
    }
}

#[derive(Debug, Default)]
pub struct FedSgd {
    global: Option<ModelParams>,
}

impl FedSgd {
    pub fn new() -> Self {
        Self::default()
    }
}

impl FederatedAlgorithm for FedSgd {
    fn name(&self) -> &'static str {
        "fedsgd"
    }

    fn round(&mut self, clients: &mut [ClientState], selected: &[usize], _ctx: &RoundContext, hyper: &HyperParams) -> Result<RoundOutcome> {
        let global = take_global(&mut self.global, clients)?;
        let next = fedsgd_round(clients, selected, &global, hyper)?;
        broadcast(clients, &next);
        self.global = Some(next);
        Ok(RoundOutcome::default())
    }
}

/// FedDist (plain mean) and FedDWS (size-weighted mean) server interpolation.
#[derive(Debug)]
pub struct FedDist {
    global: Option<ModelParams>,
    size_weighted: bool,
}

impl FedDist {
    pub fn new(size_weighted: bool) -> Self {
        FedDist { global: None, size_weighted }
    }
}

impl FederatedAlgorithm for FedDist {
    fn name(&self) -> &'static str {
        if self.size_weighted {
            "feddws"
        } else {
            "feddist"
        }
    }

    fn round(&mut self, clients: &mut [ClientState], selected: &[usize], ctx: &RoundContext, hyper: &HyperParams) -> Result<RoundOutcome> {
        let global = take_global(&mut self.global, clients)?;
        let locals = local_models(clients, selected, |_| global.clone(), Regularizer::None, ctx, hyper)?;
        let weights = self.size_weighted.then(|| train_weights(clients, selected));
        let next = feddist_update(&locals, &global, hyper.beta, weights.as_deref())?;
        let objective = spread(&locals, &next)?;
        broadcast(clients, &next);
        self.global = Some(next);
        Ok(RoundOutcome { objective: Some(objective), assignment: Vec::new() })
    }
}

/// Hypothesis-based clustering: each client joins the center with the
/// lowest training loss, then FedAvg runs inside each cluster.
#[derive(Debug)]
pub struct HypoCluster {
    arch: ModelArch,
    centers: Vec<ModelParams>,
}

impl HypoCluster {
    pub fn new(arch: ModelArch) -> Self {
        HypoCluster { arch, centers: Vec::new() }
    }

    pub fn centers(&self) -> &[ModelParams] {
        &self.centers
    }
}

impl FederatedAlgorithm for HypoCluster {
    fn name(&self) -> &'static str {
        "hypocluster"
    }

    fn is_clustered(&self) -> bool {
        true
    }

    /// Center 0 is the shared init; the rest are independent inits.
    fn initialize(&mut self, clients: &mut [ClientState], hyper: &HyperParams) -> Result<()> {
        let shared = clients.first().ok_or(Error::Empty("client list"))?.model.clone();
        self.centers = std::iter::once(shared)
            .chain((1..hyper.k).map(|k| nn::init_model(&self.arch, rng::derive_seed(hyper.seed, &[0x4859_504f, k as u64]))))
            .collect();
        Ok(())
    }

    fn round(&mut self, clients: &mut [ClientState], selected: &[usize], ctx: &RoundContext, hyper: &HyperParams) -> Result<RoundOutcome> {
        let centers = &self.centers;
        let assignment = clients
            .par_iter()
            .map(|c| hypocluster_assign(c, centers))
            .collect::<Result<Vec<_>>>()?;
        let locals = local_models(clients, selected, |i| centers[assignment[i]].clone(), Regularizer::None, ctx, hyper)?;

        let mut next = Vec::with_capacity(centers.len());
        for (k, prev) in centers.iter().enumerate() {
            let members: Vec<usize> = (0..selected.len()).filter(|&j| assignment[selected[j]] == k).collect();
            if members.is_empty() {
                next.push(prev.clone());
                continue;
            }
            let refs: Vec<&ModelParams> = members.iter().map(|&j| &locals[j]).collect();
            let ids: Vec<usize> = members.iter().map(|&j| selected[j]).collect();
            next.push(engine::weighted_average(&refs, &train_weights(clients, &ids))?);
        }
        let local_refs: Vec<&ModelParams> = locals.iter().collect();
        let local_assign: Vec<usize> = selected.iter().map(|&i| assignment[i]).collect();
        let objective = intra_cluster_objective(&local_refs, &next, &local_assign)?;
        for (c, &a) in clients.iter_mut().zip(&assignment) {
            c.model = next[a].clone();
        }
        self.centers = next;
        Ok(RoundOutcome { objective: Some(objective), assignment })
    }
}

/// Independent local training with no server.
#[derive(Debug, Default)]
pub struct NoFed;

impl FederatedAlgorithm for NoFed {
    fn name(&self) -> &'static str {
        "nofed"
    }

    fn round(&mut self, clients: &mut [ClientState], selected: &[usize], ctx: &RoundContext, hyper: &HyperParams) -> Result<RoundOutcome> {
        let models = local_models(clients, selected, |i| clients[i].model.clone(), Regularizer::None, ctx, hyper)?;
        for (&i, m) in selected.iter().zip(models) {
            clients[i].model = m;
        }
        Ok(RoundOutcome::default())
    }
}
