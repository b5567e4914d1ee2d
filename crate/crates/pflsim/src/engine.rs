//! Federated averaging engine: per-round client updates, weighted delta
//! aggregation, server optimizer application, evaluation and checkpoints.
//!
//! Determinism contract: a run is a pure function of (dataset, arch, config).
//! Client updates may execute on any number of worker threads because each
//! client's randomness comes from its own derived stream and the aggregation
//! always reduces in ascending client-id order. Checkpoints carry everything
//! needed to resume bitwise-identically.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ClientDataset, ClientId, Example, FederatedDataset, Regime, Role, RoundTrace, Split,
};
use crate::error::{Error, Result};
use crate::models::{self, ArchDescriptor, ModelParams};
use crate::optim::{server_apply, sgd_step, ServerOptSpec, ServerOptState};
use crate::rng::StreamKey;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    ByExampleCount,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::ByExampleCount
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Number of communication rounds; 0 trains nothing.
    pub total_rounds: usize,
    pub clients_per_round: usize,
    pub client_lr: f64,
    pub train_batch_size: usize,
    /// Local epochs per round.
    pub train_epochs: usize,
    pub server_opt: ServerOptSpec,
    pub weighting: Weighting,
    /// Evaluate the global model every this many rounds; 0 disables.
    pub rounds_per_evaluation: usize,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub rounds_per_checkpoint: usize,
    /// Cap on how many held-out clients each evaluation touches; `None`
    /// evaluates all of them.
    pub eval_clients_per_round: Option<usize>,
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(total_rounds: usize, clients_per_round: usize, client_lr: f64, server_opt: ServerOptSpec, seed: u64) -> Self {
        EngineConfig {
            total_rounds,
            clients_per_round,
            client_lr,
            train_batch_size: 32,
            train_epochs: 1,
            server_opt,
            weighting: Weighting::ByExampleCount,
            rounds_per_evaluation: 0,
            rounds_per_checkpoint: 0,
            eval_clients_per_round: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_rounds > 0 && self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round must be positive"));
        }
        if !(self.client_lr > 0.0) || !self.client_lr.is_finite() {
            return Err(Error::config("client_lr must be positive and finite"));
        }
        if self.train_batch_size == 0 {
            return Err(Error::config("train_batch_size must be positive"));
        }
        if self.train_epochs == 0 {
            return Err(Error::config("train_epochs must be positive"));
        }
        self.server_opt.validate()
    }
}

/// One client's local pass: `train_epochs` epochs of minibatch SGD from the
/// broadcast parameters. Returns the parameter delta and this client's
/// aggregation weight.
pub fn client_update(
    start: &ModelParams,
    local: &[&Example],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    weighting: Weighting,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    if local.is_empty() {
        return Err(Error::data("client_update on an empty local dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut params = start.clone();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..local.len()).collect();
        for i in 0..order.len() {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| local[i]).collect();
            let grad = models::gradient(&params, &batch)?;
            params = sgd_step(&params, &grad, lr)?;
        }
    }
    let delta: Vec<f64> = params
        .values
        .iter()
        .zip(&start.values)
        .map(|(a, b)| a - b)
        .collect();
    let weight = match weighting {
        Weighting::Uniform => 1.0,
        Weighting::ByExampleCount => local.len() as f64,
    };
    Ok((delta, weight))
}

/// Weighted mean of client deltas, reduced in the order given. Callers must
/// present deltas in ascending client-id order so the floating-point result
/// is canonical.
pub fn aggregate(deltas: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Err(Error::data("aggregate over no clients"));
    }
    if deltas.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} deltas against {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    let dim = deltas[0].len();
    if deltas.iter().any(|d| d.len() != dim) {
        return Err(Error::shape("client deltas disagree on dimension"));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::data("aggregation weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::data("aggregation weights sum to zero"));
    }
    // normalize before accumulating: a lone client's delta passes through
    // bitwise because w / w == 1.0 exactly
    let mut acc = vec![0.0; dim];
    for (delta, w) in deltas.iter().zip(weights) {
        let nw = w / total;
        for (a, d) in acc.iter_mut().zip(delta) {
            *a += nw * d;
        }
    }
    Ok(acc)
}

/// A point of the training-time evaluation history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub round: usize,
    pub population: Role,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgRun {
    pub params: ModelParams,
    pub traces: Vec<RoundTrace>,
    pub history: Vec<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub round: usize,
    pub params: ModelParams,
    pub server_state: ServerOptState,
    /// Base seed; together with `round` this pins every derived stream, so
    /// no other RNG state needs to be stored.
    pub seed: u64,
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion { found: ck.version, expected: CHECKPOINT_VERSION });
    }
    Ok(ck)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume_from: Option<Checkpoint>,
}

/// Clients eligible for training rounds: the train population cross-device,
/// every client with train-tagged examples cross-silo. Ascending id order.
pub fn training_pool(ds: &FederatedDataset) -> Vec<ClientId> {
    let clients = match ds.regime() {
        Regime::CrossDevice => ds.clients_in_role(Role::Train),
        Regime::CrossSilo => ds.sorted_clients(),
    };
    clients
        .into_iter()
        .filter(|c| !c.local_training_set().is_empty())
        .map(|c| c.client_id.clone())
        .collect()
}

/// Examples a held-out client is scored on during training-time evaluation.
pub(crate) fn history_eval_set<'a>(
    ds: &FederatedDataset,
    client: &'a ClientDataset,
    population: Role,
) -> Vec<&'a Example> {
    match ds.regime() {
        Regime::CrossDevice => client.tagged(Split::Evaluation),
        Regime::CrossSilo => match population {
            Role::Train => client.tagged(Split::Train),
            Role::Valid => client.tagged(Split::Valid),
            Role::Test => client.tagged(Split::Test),
        },
    }
}

/// Unweighted mean of the per-client metric over a population. Returns None
/// when the population is empty.
pub fn evaluate_population(
    ds: &FederatedDataset,
    params: &ModelParams,
    population: Role,
    limit: Option<usize>,
    round: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let clients: Vec<&ClientDataset> = ds
        .clients_in_role(population)
        .into_iter()
        .filter(|c| !history_eval_set(ds, c, population).is_empty())
        .collect();
    if clients.is_empty() {
        return Ok(None);
    }
    let chosen: Vec<&ClientDataset> = match limit {
        Some(m) if m < clients.len() => {
            let ids: Vec<ClientId> = clients.iter().map(|c| c.client_id.clone()).collect();
            let picked = crate::data::sample_clients(
                &ids,
                m,
                round,
                StreamKey::new(seed).label("evalsub").label(population.as_str()).seed(),
            )?;
            clients
                .iter()
                .filter(|c| picked.contains(&c.client_id))
                .copied()
                .collect()
        }
        _ => clients,
    };
    let metrics: Vec<f64> = chosen
        .par_iter()
        .map(|c| models::evaluate_metric(params, &history_eval_set(ds, c, population)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(metrics.iter().sum::<f64>() / metrics.len() as f64))
}

/// Folds several runs' per-round traces into one sequence: counts add up,
/// touched-client lists merge. All runs must cover the same rounds.
pub fn merge_traces(per_run: &[&[RoundTrace]]) -> Result<Vec<RoundTrace>> {
    let first = match per_run.first() {
        Some(t) => t,
        None => return Err(Error::data("merging zero trace sequences")),
    };
    if per_run.iter().any(|t| t.len() != first.len()) {
        return Err(Error::shape("trace sequences disagree on round count"));
    }
    let mut merged = Vec::with_capacity(first.len());
    for r in 0..first.len() {
        let mut touched: Vec<ClientId> = per_run
            .iter()
            .flat_map(|t| t[r].sampled_client_ids.iter().cloned())
            .collect();
        touched.sort();
        touched.dedup();
        merged.push(RoundTrace {
            round: first[r].round,
            sampled_client_ids: touched,
            params_broadcast: per_run.iter().map(|t| t[r].params_broadcast).sum(),
            params_uploaded: per_run.iter().map(|t| t[r].params_uploaded).sum(),
            cluster_assignments: None,
        });
    }
    Ok(merged)
}

pub fn run_fedavg(ds: &FederatedDataset, arch: &ArchDescriptor, cfg: &EngineConfig) -> Result<FedAvgRun> {
    run_fedavg_opts(ds, arch, cfg, &RunOptions::default())
}

pub fn run_fedavg_opts(
    ds: &FederatedDataset,
    arch: &ArchDescriptor,
    cfg: &EngineConfig,
    opts: &RunOptions,
) -> Result<FedAvgRun> {
    cfg.validate()?;
    arch.validate()?;

    let pool = training_pool(ds);
    if cfg.total_rounds > 0 && cfg.clients_per_round > pool.len() {
        return Err(Error::config(format!(
            "clients_per_round = {} exceeds the training pool of {}",
            cfg.clients_per_round,
            pool.len()
        )));
    }

    let (mut params, mut state, start_round) = match &opts.resume_from {
        Some(ck) => {
            if ck.params.arch != *arch {
                return Err(Error::config("checkpoint architecture does not match"));
            }
            if ck.seed != cfg.seed {
                return Err(Error::config("checkpoint seed does not match the run seed"));
            }
            (ck.params.clone(), ck.server_state.clone(), ck.round)
        }
        None => {
            let params = models::init_params(arch, cfg.seed)?;
            let state = ServerOptState::new(cfg.server_opt, params.len())?;
            (params, state, 0)
        }
    };

    let mut traces = Vec::new();
    let mut history = Vec::new();

    for round in (start_round + 1)..=cfg.total_rounds {
        let sampled = crate::data::sample_clients(&pool, cfg.clients_per_round, round, cfg.seed)?;

        let mut results: Vec<(ClientId, Vec<f64>, f64)> = sampled
            .par_iter()
            .map(|id| {
                let client = ds
                    .client(id)
                    .ok_or_else(|| Error::data(format!("sampled unknown client {:?}", id.as_str())))?;
                let local = client.local_training_set();
                let mut rng = StreamKey::new(cfg.seed)
                    .label("client")
                    .index(round as u64)
                    .label(id.as_str())
                    .rng();
                let (delta, weight) = client_update(
                    &params,
                    &local,
                    cfg.train_epochs,
                    cfg.train_batch_size,
                    cfg.client_lr,
                    cfg.weighting,
                    &mut rng,
                )?;
                Ok((id.clone(), delta, weight))
            })
            .collect::<Result<Vec<_>>>()?;
        results.sort_by(|a, b| a.0.cmp(&b.0));

        let ids: Vec<ClientId> = results.iter().map(|r| r.0.clone()).collect();
        let deltas: Vec<Vec<f64>> = results.iter().map(|r| r.1.clone()).collect();
        let weights: Vec<f64> = results.iter().map(|r| r.2).collect();
        let delta = aggregate(&deltas, &weights)?;
        let pseudo_grad: Vec<f64> = delta.iter().map(|d| -d).collect();
        let (next_params, next_state) = server_apply(&state, &params, &pseudo_grad)?;
        params = next_params;
        state = next_state;

        let model_size = params.len() as u64;
        traces.push(RoundTrace {
            round,
            sampled_client_ids: ids,
            params_broadcast: cfg.clients_per_round as u64 * model_size,
            params_uploaded: cfg.clients_per_round as u64 * model_size,
            cluster_assignments: None,
        });

        if cfg.rounds_per_evaluation > 0 && round % cfg.rounds_per_evaluation == 0 {
            for population in [Role::Valid, Role::Test] {
                if let Some(metric) = evaluate_population(
                    ds,
                    &params,
                    population,
                    cfg.eval_clients_per_round,
                    round,
                    cfg.seed,
                )? {
                    history.push(EvalPoint { round, population, metric });
                }
            }
        }

        if cfg.rounds_per_checkpoint > 0 && round % cfg.rounds_per_checkpoint == 0 {
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let ck = Checkpoint {
                    version: CHECKPOINT_VERSION,
                    round,
                    params: params.clone(),
                    server_state: state.clone(),
                    seed: cfg.seed,
                };
                save_checkpoint(&ck, &dir.join(format!("checkpoint_{round:06}.json")))?;
            }
        }
    }

    Ok(FedAvgRun { params, traces, history })
}
