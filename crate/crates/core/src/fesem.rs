//! Federated stochastic EM over client model parameters.
//!
//! Each round alternates three updates: assign every client model to its
//! nearest center (E-step), recompute each center as the mean of its members
//! (M-step), then send each center to its members for a distance-constrained
//! local update.

use rand::seq::index;
use rayon::prelude::*;

use crate::data::FederatedDataset;
use crate::engine::{self, ClientState, FederatedAlgorithm, HyperParams, RoundContext, RoundOutcome};
use crate::error::{check_len, Error, Result};
use crate::nn::{sq_dist, ModelArch, ModelParams};
use crate::rng::{self, tag};

/// Inner k-means iteration cap used by [`init_centers`].
pub const INIT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub centers: Vec<ModelParams>,
    /// Center index per device.
    pub assignment: Vec<usize>,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == k)
            .collect()
    }
}

fn check_shapes(models: &[&ModelParams], centers: &[ModelParams]) -> Result<()> {
    let len = centers.first().ok_or(Error::Empty("centers"))?.len();
    if models.is_empty() {
        return Err(Error::Empty("models"));
    }
    for c in centers {
        check_len(c.len(), len)?;
    }
    for m in models {
        check_len(m.len(), len)?;
    }
    Ok(())
}

/// Nearest center per model under squared L2; ties go to the lower index.
pub fn e_step(models: &[&ModelParams], centers: &[ModelParams]) -> Result<Vec<usize>> {
    check_shapes(models, centers)?;
    Ok(models
        .iter()
        .map(|m| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = sq_dist(&m.values, &c.values);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

fn check_assignment(n: usize, assignment: &[usize], k: usize) -> Result<()> {
    check_len(assignment.len(), n)?;
    if let Some(&bad) = assignment.iter().find(|&&a| a >= k) {
        return Err(Error::invalid(format!("assignment {bad} out of range for {k} centers")));
    }
    Ok(())
}

/// Center = unweighted mean of its members; empty clusters keep `prev`.
pub fn m_step(models: &[&ModelParams], assignment: &[usize], prev: &[ModelParams]) -> Result<Vec<ModelParams>> {
    check_shapes(models, prev)?;
    check_assignment(models.len(), assignment, prev.len())?;
    let mut sums = vec![vec![0.0; prev[0].len()]; prev.len()];
    let mut counts = vec![0usize; prev.len()];
    for (m, &a) in models.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(&m.values) {
            *s += v;
        }
    }
    Ok(prev
        .iter()
        .zip(sums.into_iter().zip(counts))
        .map(|(p, (mut s, n))| {
            if n == 0 {
                return p.clone();
            }
            for v in &mut s {
                *v /= n as f64;
            }
            p.with_values(s)
        })
        .collect())
}

/// Weighted variant of [`m_step`]; clusters whose members all carry zero
/// weight keep their previous center.
pub fn m_step_weighted(
    models: &[&ModelParams],
    assignment: &[usize],
    weights: &[f64],
    prev: &[ModelParams],
) -> Result<Vec<ModelParams>> {
    check_shapes(models, prev)?;
    check_assignment(models.len(), assignment, prev.len())?;
    check_len(weights.len(), models.len())?;
    prev.iter()
        .enumerate()
        .map(|(k, p)| {
            let (members, w): (Vec<&ModelParams>, Vec<f64>) = models
                .iter()
                .zip(assignment)
                .zip(weights)
                .filter(|((_, &a), _)| a == k)
                .map(|((m, _), &w)| (*m, w))
                .unzip();
            if w.iter().sum::<f64>() > 0.0 {
                engine::weighted_average(&members, &w)
            } else {
                Ok(p.clone())
            }
        })
        .collect()
}

/// `(1/m) * sum_i ||W_i - center_{a_i}||^2`.
pub fn intra_cluster_objective(models: &[&ModelParams], centers: &[ModelParams], assignment: &[usize]) -> Result<f64> {
    check_shapes(models, centers)?;
    check_assignment(models.len(), assignment, centers.len())?;
    let total: f64 = models
        .iter()
        .zip(assignment)
        .map(|(m, &a)| sq_dist(&m.values, &centers[a].values))
        .sum();
    Ok(total / models.len() as f64)
}

/// Size-weighted mean supervised loss plus `lambda` times the intra-cluster objective.
pub fn multi_center_objective(
    losses: &[f64],
    sizes: &[usize],
    models: &[&ModelParams],
    centers: &[ModelParams],
    assignment: &[usize],
    lambda: f64,
) -> Result<f64> {
    check_len(losses.len(), sizes.len())?;
    check_len(losses.len(), models.len())?;
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("total data size is zero"));
    }
    let data_term: f64 = losses
        .iter()
        .zip(sizes)
        .map(|(l, &s)| s as f64 / total as f64 * l)
        .sum();
    Ok(data_term + lambda * intra_cluster_objective(models, centers, assignment)?)
}

/// Plain k-means over static model vectors from one seeding.
fn kmeans(models: &[&ModelParams], mut centers: Vec<ModelParams>) -> Result<ClusterState> {
    let mut assignment = e_step(models, &centers)?;
    for _ in 0..INIT_MAX_ITERS {
        centers = m_step(models, &assignment, &centers)?;
        let next = e_step(models, &centers)?;
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(ClusterState { centers, assignment })
}

/// Best of `restarts` k-means runs, each seeded with `k` distinct models,
/// by intra-cluster objective.
pub fn init_centers(models: &[&ModelParams], k: usize, restarts: usize, seed: u64) -> Result<ClusterState> {
    let m = models.len();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={m}")));
    }
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut best: Option<(f64, ClusterState)> = None;
    for r in 0..restarts {
        let mut rng = rng::rng_for(seed, &[tag::CENTERS, r as u64]);
        let seeds: Vec<ModelParams> = index::sample(&mut rng, m, k)
            .into_iter()
            .map(|i| models[i].clone())
            .collect();
        let state = kmeans(models, seeds)?;
        let obj = intra_cluster_objective(models, &state.centers, &state.assignment)?;
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, state));
        }
    }
    Ok(best.expect("restarts >= 1").1)
}

fn center_update(models: &[&ModelParams], assignment: &[usize], prev: &[ModelParams], clients: &[ClientState], hyper: &HyperParams) -> Result<Vec<ModelParams>> {
    if hyper.weighted_m_step {
        let w: Vec<f64> = clients.iter().map(|c| c.data.train.len() as f64).collect();
        m_step_weighted(models, assignment, &w, prev)
    } else {
        m_step(models, assignment, prev)
    }
}

/// One FeSEM round: E-step on the current client models, M-step, then a
/// local update of every participating client from its center. Returns
/// the new state and every client's model (non-participants unchanged).
pub fn fesem_round(
    clients: &[ClientState],
    state: &ClusterState,
    selected: &[usize],
    ctx: &RoundContext,
    hyper: &HyperParams,
) -> Result<(ClusterState, Vec<ModelParams>)> {
    let models: Vec<&ModelParams> = clients.iter().map(|c| &c.model).collect();
    let assignment = e_step(&models, &state.centers)?;
    let centers = center_update(&models, &assignment, &state.centers, clients, hyper)?;

    let updated = selected
        .par_iter()
        .map(|&i| engine::local_update(&clients[i], &centers[assignment[i]], ctx, hyper).map(|m| (i, m)))
        .collect::<Result<Vec<_>>>()?;
    let mut next: Vec<ModelParams> = clients.iter().map(|c| c.model.clone()).collect();
    for (i, m) in updated {
        next[i] = m;
    }
    Ok((ClusterState { centers, assignment }, next))
}

/// FeSEM as a pluggable algorithm. Clients are scored with the
/// aggregate of their cluster's updated local models.
#[derive(Debug, Default)]
pub struct FeSem {
    pub state: Option<ClusterState>,
    aggregates: Vec<ModelParams>,
}

impl FeSem {
    pub fn new() -> Self {
        FeSem::default()
    }
}

impl FederatedAlgorithm for FeSem {
    fn name(&self) -> &'static str {
        "fesem"
    }

    fn is_clustered(&self) -> bool {
        true
    }

    /// Every client trains once from the shared init, then the centers are
    /// chosen by restarted k-means over those models.
    fn initialize(&mut self, clients: &mut [ClientState], hyper: &HyperParams) -> Result<()> {
        if hyper.k > clients.len() {
            return Err(Error::config("hyper.k", format!("k = {} exceeds device count {}", hyper.k, clients.len())));
        }
        let ctx = RoundContext::new(clients, 0);
        let warm = clients
            .par_iter()
            .map(|c| engine::local_update(c, &c.model, &ctx, hyper))
            .collect::<Result<Vec<_>>>()?;
        for (c, m) in clients.iter_mut().zip(warm) {
            c.model = m;
        }
        let models: Vec<&ModelParams> = clients.iter().map(|c| &c.model).collect();
        let seed = rng::derive_seed(hyper.seed, &[tag::CENTERS]);
        self.state = Some(init_centers(&models, hyper.k, hyper.init_restarts, seed)?);
        Ok(())
    }

    fn eval_model<'a>(&'a self, clients: &'a [ClientState], i: usize) -> &'a ModelParams {
        match &self.state {
            Some(s) if !self.aggregates.is_empty() => &self.aggregates[s.assignment[i]],
            _ => &clients[i].model,
        }
    }

    fn round(
        &mut self,
        clients: &mut [ClientState],
        selected: &[usize],
        ctx: &RoundContext,
        hyper: &HyperParams,
    ) -> Result<RoundOutcome> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::invalid("FeSEM round before initialization"))?;
        let (next, models) = fesem_round(clients, state, selected, ctx, hyper)?;
        for (c, m) in clients.iter_mut().zip(models) {
            c.model = m;
        }
        let refs: Vec<&ModelParams> = clients.iter().map(|c| &c.model).collect();
        let objective = intra_cluster_objective(&refs, &next.centers, &next.assignment)?;
        self.aggregates = center_update(&refs, &next.assignment, &next.centers, clients, hyper)?;
        let assignment = next.assignment.clone();
        self.state = Some(next);
        Ok(RoundOutcome {
            objective: Some(objective),
            assignment,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectKReport {
    pub chosen: usize,
    /// `(k, macro test accuracy after the probe rounds)` per candidate.
    pub scores: Vec<(usize, f64)>,
}

/// Probes each candidate `K` with a short FeSEM run on a random device
/// subsample and keeps the best macro accuracy (ties to the smaller `K`).
pub fn select_k(
    dataset: &FederatedDataset,
    arch: &ModelArch,
    candidates: &[usize],
    sample_size: usize,
    probe_rounds: usize,
    hyper: &HyperParams,
    seed: u64,
) -> Result<SelectKReport> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate K list"));
    }
    let m = dataset.m();
    if sample_size == 0 || sample_size > m {
        return Err(Error::invalid(format!("sample size {sample_size} must lie in 1..={m}")));
    }
    let mut idx = index::sample(&mut rng::rng_for(seed, &[tag::PROBE]), m, sample_size).into_vec();
    idx.sort_unstable();
    let probe = dataset.subset(&idx);

    let mut scores = Vec::with_capacity(candidates.len());
    for &k in candidates {
        let probe_hyper = HyperParams {
            k,
            rounds: probe_rounds,
            seed,
            ..hyper.clone()
        };
        let (logs, _) = engine::simulate(&probe, arch, &mut FeSem::new(), &probe_hyper)?;
        let acc = logs.last().expect("round 0 is always logged").macro_acc();
        scores.push((k, acc));
    }
    let mut chosen = scores[0];
    for &(k, acc) in &scores[1..] {
        if acc > chosen.1 || (acc == chosen.1 && k < chosen.0) {
            chosen = (k, acc);
        }
    }
    Ok(SelectKReport {
        chosen: chosen.0,
        scores,
    })
}
