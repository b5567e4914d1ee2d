//! Clustered federated training: k models trained jointly, every sampled
//! client picking the one with the lowest training loss each round and
//! contributing its update only to that model's aggregate. Personalization
//! is the same selection rule applied to a client's personalization set.
//!
//! With k = 1 the whole procedure collapses to plain federated averaging,
//! bitwise: sampling, client streams and aggregation arithmetic are shared
//! with the engine. Identical model inits (zero-initialized linear families
//! without warmstart) never separate, because loss ties resolve to the
//! lowest index every round; the streak detector below makes that failure
//! mode visible instead of silent.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sample_clients;
use crate::datamodel::{
    ClientId, ClientRecord, Example, FederatedDataset, PerClientMetrics, Role, RoundTrace,
};
use crate::engine::{
    client_update, aggregate, history_eval_set, training_pool, EngineConfig, EvalPoint, FedAvgRun,
    run_fedavg,
};
use crate::error::{Error, Result};
use crate::models::{self, ArchDescriptor, ModelParams};
use crate::optim::{server_apply, ServerOptState};
use crate::personalize::reporting_clients;
use crate::rng::StreamKey;

/// Rounds of unanimous cluster choice before a run is flagged as collapsed.
pub const COLLAPSE_STREAK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypClusterConfig {
    pub k: usize,
    /// Fraction of the round budget spent warmstarting each model with its
    /// own independent single-model run (seeds seed, seed+1, ...). Breaks
    /// the init symmetry that otherwise traps zero-initialized families.
    pub warmstart_fraction: f64,
    pub engine: EngineConfig,
}

impl HypClusterConfig {
    pub fn new(k: usize, engine: EngineConfig) -> Self {
        HypClusterConfig { k, warmstart_fraction: 0.0, engine }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("cluster count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmstart_fraction) {
            return Err(Error::config("warmstart_fraction must lie in [0, 1]"));
        }
        self.engine.validate()
    }

    pub fn warmstart_rounds(&self) -> usize {
        (self.warmstart_fraction * self.engine.total_rounds as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypClusterRun {
    pub models: Vec<ModelParams>,
    pub traces: Vec<RoundTrace>,
    pub history: Vec<EvalPoint>,
    /// First round at which every sampled client had chosen the same
    /// cluster for `COLLAPSE_STREAK` consecutive rounds.
    pub collapse_round: Option<usize>,
}

/// Index of the model with the lowest mean loss on the given examples,
/// ties to the lowest index.
pub fn select_model(models: &[ModelParams], examples: &[&Example]) -> Result<usize> {
    if models.is_empty() {
        return Err(Error::data("selecting among zero models"));
    }
    let mut best = 0usize;
    let mut best_loss = models::loss(&models[0], examples)?;
    for (j, m) in models.iter().enumerate().skip(1) {
        let l = models::loss(m, examples)?;
        if l < best_loss {
            best = j;
            best_loss = l;
        }
    }
    Ok(best)
}

pub fn run_hypcluster(
    ds: &FederatedDataset,
    arch: &ArchDescriptor,
    cfg: &HypClusterConfig,
) -> Result<HypClusterRun> {
    cfg.validate()?;
    arch.validate()?;
    let pool = training_pool(ds);
    if cfg.engine.total_rounds > 0 && cfg.engine.clients_per_round > pool.len() {
        return Err(Error::config(format!(
            "clients_per_round = {} exceeds the training pool of {}",
            cfg.engine.clients_per_round,
            pool.len()
        )));
    }
    let k = cfg.k;
    let model_size = arch.param_count() as u64;
    let ws_rounds = cfg.warmstart_rounds();
    let mut traces: Vec<RoundTrace> = Vec::new();

    let mut models_k: Vec<ModelParams> = if ws_rounds > 0 {
        let runs: Vec<FedAvgRun> = (0..k)
            .map(|j| {
                let mut sub = cfg.engine;
                sub.total_rounds = ws_rounds;
                sub.seed = cfg.engine.seed + j as u64;
                sub.rounds_per_evaluation = 0;
                sub.rounds_per_checkpoint = 0;
                run_fedavg(ds, arch, &sub)
            })
            .collect::<Result<Vec<_>>>()?;
        // warmstart rounds cost k parallel runs; fold them into one trace
        // per round so cumulative accounting stays exact
        let per_run: Vec<&[RoundTrace]> = runs.iter().map(|run| run.traces.as_slice()).collect();
        traces = crate::engine::merge_traces(&per_run)?;
        runs.into_iter().map(|run| run.params).collect()
    } else {
        (0..k)
            .map(|j| models::init_params(arch, cfg.engine.seed + j as u64))
            .collect::<Result<Vec<_>>>()?
    };

    let mut states: Vec<ServerOptState> = (0..k)
        .map(|_| ServerOptState::new(cfg.engine.server_opt, arch.param_count()))
        .collect::<Result<Vec<_>>>()?;

    let mut history: Vec<EvalPoint> = Vec::new();
    let mut streak = 0usize;
    let mut collapse_round = None;

    for round in (ws_rounds + 1)..=cfg.engine.total_rounds {
        let sampled = sample_clients(&pool, cfg.engine.clients_per_round, round, cfg.engine.seed)?;

        let mut results: Vec<(ClientId, usize, Vec<f64>, f64)> = sampled
            .par_iter()
            .map(|id| {
                let client = ds
                    .client(id)
                    .ok_or_else(|| Error::data(format!("sampled unknown client {:?}", id.as_str())))?;
                let local = client.local_training_set();
                let chosen = select_model(&models_k, &local)?;
                let mut rng = StreamKey::new(cfg.engine.seed)
                    .label("client")
                    .index(round as u64)
                    .label(id.as_str())
                    .rng();
                let (delta, weight) = client_update(
                    &models_k[chosen],
                    &local,
                    cfg.engine.train_epochs,
                    cfg.engine.train_batch_size,
                    cfg.engine.client_lr,
                    cfg.engine.weighting,
                    &mut rng,
                )?;
                Ok((id.clone(), chosen, delta, weight))
            })
            .collect::<Result<Vec<_>>>()?;
        results.sort_by(|a, b| a.0.cmp(&b.0));

        let assignments: BTreeMap<ClientId, usize> =
            results.iter().map(|(id, j, _, _)| (id.clone(), *j)).collect();

        for j in 0..k {
            let deltas: Vec<Vec<f64>> = results
                .iter()
                .filter(|(_, c, _, _)| *c == j)
                .map(|(_, _, d, _)| d.clone())
                .collect();
            if deltas.is_empty() {
                continue; // empty cluster: model and optimizer state untouched
            }
            let weights: Vec<f64> = results
                .iter()
                .filter(|(_, c, _, _)| *c == j)
                .map(|(_, _, _, w)| *w)
                .collect();
            let delta = aggregate(&deltas, &weights)?;
            let pseudo_grad: Vec<f64> = delta.iter().map(|d| -d).collect();
            let (next, state) = server_apply(&states[j], &models_k[j], &pseudo_grad)?;
            models_k[j] = next;
            states[j] = state;
        }

        let ids: Vec<ClientId> = results.iter().map(|r| r.0.clone()).collect();
        let unanimous = results.iter().all(|(_, j, _, _)| *j == results[0].1);
        if unanimous {
            streak += 1;
            if streak >= COLLAPSE_STREAK && collapse_round.is_none() {
                collapse_round = Some(round);
            }
        } else {
            streak = 0;
        }

        traces.push(RoundTrace {
            round,
            sampled_client_ids: ids,
            params_broadcast: k as u64 * model_size * cfg.engine.clients_per_round as u64,
            params_uploaded: k as u64 * model_size * cfg.engine.clients_per_round as u64,
            cluster_assignments: Some(assignments),
        });

        if cfg.engine.rounds_per_evaluation > 0 && round % cfg.engine.rounds_per_evaluation == 0 {
            for population in [Role::Valid, Role::Test] {
                if let Some(metric) = evaluate_selected(ds, &models_k, population)? {
                    history.push(EvalPoint { round, population, metric });
                }
            }
        }
    }

    Ok(HypClusterRun { models: models_k, traces, history, collapse_round })
}

/// Mean metric over a population where each client is scored with the model
/// it selects from its personalization set.
fn evaluate_selected(
    ds: &FederatedDataset,
    models_k: &[ModelParams],
    population: Role,
) -> Result<Option<f64>> {
    let clients: Vec<_> = ds
        .clients_in_role(population)
        .into_iter()
        .filter(|c| {
            !ds.personalization_set(c).is_empty() && !history_eval_set(ds, c, population).is_empty()
        })
        .collect();
    if clients.is_empty() {
        return Ok(None);
    }
    let metrics: Vec<f64> = clients
        .par_iter()
        .map(|c| {
            let chosen = select_model(models_k, &ds.personalization_set(c))?;
            models::evaluate_metric(&models_k[chosen], &history_eval_set(ds, c, population))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(metrics.iter().sum::<f64>() / metrics.len() as f64))
}

/// Per-client before/after metrics on the reporting population, plus each
/// client's selection. "Before" scores the first model so the comparison
/// isolates what per-client selection buys.
pub fn hypcluster_evaluate(
    ds: &FederatedDataset,
    models_k: &[ModelParams],
) -> Result<(PerClientMetrics, BTreeMap<ClientId, usize>)> {
    if models_k.is_empty() {
        return Err(Error::data("evaluating zero models"));
    }
    let kind = models_k[0].arch.metric_kind();
    let jobs: Vec<_> = reporting_clients(ds)
        .into_iter()
        .filter(|c| !ds.personalization_set(c).is_empty() && !ds.evaluation_set(c).is_empty())
        .collect();
    let results: Vec<(ClientRecord, usize)> = jobs
        .par_iter()
        .map(|c| {
            let pers = ds.personalization_set(c);
            let eval = ds.evaluation_set(c);
            let chosen = select_model(models_k, &pers)?;
            let record = ClientRecord {
                client_id: c.client_id.clone(),
                metric_before: models::evaluate_metric(&models_k[0], &eval)?,
                metric_after: models::evaluate_metric(&models_k[chosen], &eval)?,
                n_personalization: pers.len(),
                n_evaluation: eval.len(),
            };
            Ok((record, chosen))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_client = PerClientMetrics::new(kind);
    let mut selections = BTreeMap::new();
    for (record, chosen) in results {
        selections.insert(record.client_id.clone(), chosen);
        per_client.records.push(record);
    }
    Ok((per_client, selections))
}

/// Cluster choice of every training-pool client based on its own local
/// training examples. Feed to `cluster_purity` against a known design.
pub fn assign_training_clients(
    ds: &FederatedDataset,
    models_k: &[ModelParams],
) -> Result<BTreeMap<ClientId, usize>> {
    let pool = training_pool(ds);
    let assignments: Vec<(ClientId, usize)> = pool
        .par_iter()
        .map(|id| {
            let client = ds.client(id).unwrap();
            let chosen = select_model(models_k, &client.local_training_set())?;
            Ok((id.clone(), chosen))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assignments.into_iter().collect())
}

/// Fraction of clients whose predicted cluster agrees with the best
/// one-to-many matching of predicted clusters onto reference groups.
pub fn cluster_purity(
    predicted: &BTreeMap<ClientId, usize>,
    reference: &BTreeMap<ClientId, usize>,
) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let mut overlap: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut total = 0usize;
    for (id, p) in predicted {
        if let Some(r) = reference.get(id) {
            *overlap.entry((*p, *r)).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let mut by_pred: BTreeMap<usize, usize> = BTreeMap::new();
    for ((p, _), n) in &overlap {
        let best = by_pred.entry(*p).or_insert(0);
        *best = (*best).max(*n);
    }
    by_pred.values().sum::<usize>() as f64 / total as f64
}

/// k independent single-model runs at consecutive seeds; the ensemble
/// baseline against which joint clustering is judged.
pub fn ensemble_k_fedavg(
    ds: &FederatedDataset,
    arch: &ArchDescriptor,
    engine: &EngineConfig,
    k: usize,
) -> Result<Vec<FedAvgRun>> {
    let seeds: Vec<u64> = (0..k as u64).map(|j| engine.seed + j).collect();
    ensemble_fedavg_with_seeds(ds, arch, engine, &seeds)
}

pub fn ensemble_fedavg_with_seeds(
    ds: &FederatedDataset,
    arch: &ArchDescriptor,
    engine: &EngineConfig,
    seeds: &[u64],
) -> Result<Vec<FedAvgRun>> {
    if seeds.is_empty() {
        return Err(Error::config("ensemble needs at least one seed"));
    }
    seeds
        .iter()
        .map(|&seed| {
            let mut sub = *engine;
            sub.seed = seed;
            run_fedavg(ds, arch, &sub)
        })
        .collect()
}
