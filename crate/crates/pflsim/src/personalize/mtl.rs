//! Multi-task personalization for the cross-silo regime, where every client
//! persists across rounds and can keep private state.
//!
//! Two objectives: a per-client model regularized toward the concurrently
//! trained global model (the global trajectory stays bitwise identical to
//! plain federated averaging, because the personal updates draw from their
//! own streams and never feed the aggregate), and a primal task-relationship
//! objective for linear families where a matrix over clients is alternately
//! re-estimated from the stacked per-client weights and used to couple
//! their updates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sample_clients;
use crate::datamodel::{
    ClientId, ClientRecord, Example, FederatedDataset, PerClientMetrics, Regime, Role, RoundTrace,
};
use crate::engine::{
    aggregate, client_update, evaluate_population, training_pool, EngineConfig, EvalPoint,
    FedAvgRun,
};
use crate::error::{Error, Result};
use crate::models::{self, ArchDescriptor, ModelParams};
use crate::optim::{server_apply, sgd_step, ServerOptState};
use crate::personalize::reporting_clients;
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DittoConfig {
    /// Pull of each personal model toward the current global model; 0
    /// decouples them entirely.
    pub lambda: f64,
    pub personal_lr: f64,
    pub personal_epochs: usize,
    pub engine: EngineConfig,
}

impl DittoConfig {
    pub fn new(lambda: f64, personal_lr: f64, engine: EngineConfig) -> Self {
        DittoConfig { lambda, personal_lr, personal_epochs: 1, engine }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be non-negative and finite"));
        }
        if !(self.personal_lr > 0.0) || !self.personal_lr.is_finite() {
            return Err(Error::config("personal_lr must be positive and finite"));
        }
        if self.personal_epochs == 0 {
            return Err(Error::config("personal_epochs must be positive"));
        }
        self.engine.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DittoRun {
    pub global: FedAvgRun,
    /// Per-client personal models; a client appears once it has been
    /// sampled at least once.
    pub personal: BTreeMap<ClientId, ModelParams>,
}

/// One pass of regularized SGD on the personal model: plain minibatch
/// gradients plus `lambda * (v - w)` pulling toward the broadcast model.
fn personal_update(
    v_start: &ModelParams,
    anchor: &ModelParams,
    local: &[&Example],
    cfg: &DittoConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ModelParams> {
    let mut v = v_start.clone();
    for _ in 0..cfg.personal_epochs {
        let mut order: Vec<usize> = (0..local.len()).collect();
        for i in 0..order.len() {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.engine.train_batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| local[i]).collect();
            let mut grad = models::gradient(&v, &batch)?;
            if cfg.lambda != 0.0 {
                for ((g, vi), wi) in grad.iter_mut().zip(&v.values).zip(&anchor.values) {
                    *g += cfg.lambda * (vi - wi);
                }
            }
            v = sgd_step(&v, &grad, cfg.personal_lr)?;
        }
    }
    Ok(v)
}

pub fn run_ditto(ds: &FederatedDataset, arch: &ArchDescriptor, cfg: &DittoConfig) -> Result<DittoRun> {
    cfg.validate()?;
    arch.validate()?;
    if ds.regime() != Regime::CrossSilo {
        return Err(Error::config("per-client persistent models need the cross-silo regime"));
    }
    let pool = training_pool(ds);
    if cfg.engine.total_rounds > 0 && cfg.engine.clients_per_round > pool.len() {
        return Err(Error::config(format!(
            "clients_per_round = {} exceeds the training pool of {}",
            cfg.engine.clients_per_round,
            pool.len()
        )));
    }

    let mut params = models::init_params(arch, cfg.engine.seed)?;
    let mut state = ServerOptState::new(cfg.engine.server_opt, params.len())?;
    let mut personal: BTreeMap<ClientId, ModelParams> = BTreeMap::new();
    let mut traces = Vec::new();
    let mut history: Vec<EvalPoint> = Vec::new();

    for round in 1..=cfg.engine.total_rounds {
        let sampled = sample_clients(&pool, cfg.engine.clients_per_round, round, cfg.engine.seed)?;

        let mut results: Vec<(ClientId, Vec<f64>, f64, ModelParams)> = sampled
            .par_iter()
            .map(|id| {
                let client = ds
                    .client(id)
                    .ok_or_else(|| Error::data(format!("sampled unknown client {:?}", id.as_str())))?;
                let local = client.local_training_set();
                // the global half is exactly the engine's client update
                let mut rng = StreamKey::new(cfg.engine.seed)
                    .label("client")
                    .index(round as u64)
                    .label(id.as_str())
                    .rng();
                let (delta, weight) = client_update(
                    &params,
                    &local,
                    cfg.engine.train_epochs,
                    cfg.engine.train_batch_size,
                    cfg.engine.client_lr,
                    cfg.engine.weighting,
                    &mut rng,
                )?;
                // the personal half draws from its own stream so it can
                // never perturb the global trajectory
                let v_start = personal.get(id).cloned().unwrap_or_else(|| params.clone());
                let mut personal_rng = StreamKey::new(cfg.engine.seed)
                    .label("ditto")
                    .index(round as u64)
                    .label(id.as_str())
                    .rng();
                let v = personal_update(&v_start, &params, &local, cfg, &mut personal_rng)?;
                Ok((id.clone(), delta, weight, v))
            })
            .collect::<Result<Vec<_>>>()?;
        results.sort_by(|a, b| a.0.cmp(&b.0));

        for (id, _, _, v) in &results {
            personal.insert(id.clone(), v.clone());
        }

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
            params_broadcast: cfg.engine.clients_per_round as u64 * model_size,
            params_uploaded: cfg.engine.clients_per_round as u64 * model_size,
            cluster_assignments: None,
        });

        if cfg.engine.rounds_per_evaluation > 0 && round % cfg.engine.rounds_per_evaluation == 0 {
            for population in [Role::Valid, Role::Test] {
                if let Some(metric) = evaluate_population(
                    ds,
                    &params,
                    population,
                    cfg.engine.eval_clients_per_round,
                    round,
                    cfg.engine.seed,
                )? {
                    history.push(EvalPoint { round, population, metric });
                }
            }
        }
    }

    Ok(DittoRun { global: FedAvgRun { params, traces, history }, personal })
}

/// Per-client before/after metrics: the personal model against the global
/// one on each client's held-out examples. Clients never sampled keep the
/// global model.
pub fn ditto_evaluate(ds: &FederatedDataset, run: &DittoRun) -> Result<PerClientMetrics> {
    let kind = run.global.params.arch.metric_kind();
    let jobs: Vec<_> = reporting_clients(ds)
        .into_iter()
        .filter(|c| !ds.evaluation_set(c).is_empty())
        .collect();
    let records: Vec<ClientRecord> = jobs
        .par_iter()
        .map(|c| {
            let eval = ds.evaluation_set(c);
            let v = run.personal.get(&c.client_id).unwrap_or(&run.global.params);
            Ok(ClientRecord {
                client_id: c.client_id.clone(),
                metric_before: models::evaluate_metric(&run.global.params, &eval)?,
                metric_after: models::evaluate_metric(v, &eval)?,
                n_personalization: ds.personalization_set(c).len(),
                n_evaluation: eval.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = PerClientMetrics::new(kind);
    out.records = records;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MochaConfig {
    /// Strength of the task-relationship coupling.
    pub lambda: f64,
    /// Alternations between client training and relationship re-estimation.
    pub outer_iters: usize,
    /// Local SGD epochs per outer iteration.
    pub inner_epochs: usize,
    pub client_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl MochaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be non-negative and finite"));
        }
        if self.outer_iters == 0 || self.inner_epochs == 0 {
            return Err(Error::config("outer_iters and inner_epochs must be positive"));
        }
        if !(self.client_lr > 0.0) || !self.client_lr.is_finite() {
            return Err(Error::config("client_lr must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MochaRun {
    pub models: BTreeMap<ClientId, ModelParams>,
    /// Final task-relationship matrix, rows in the same ascending client
    /// order as `models`. Symmetric PSD with unit trace.
    pub omega: Vec<Vec<f64>>,
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let k = rows.len();
    DMatrix::from_fn(k, k, |i, j| rows[i][j])
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Re-estimates the relationship matrix from stacked per-client weight
/// columns: the PSD square root of the Gram matrix, normalized to unit
/// trace. All-zero weights fall back to the uniform matrix.
pub fn omega_update(columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = columns.len();
    if k == 0 {
        return Err(Error::shape("relationship update over zero clients"));
    }
    let dim = columns[0].len();
    if columns.iter().any(|c| c.len() != dim) {
        return Err(Error::shape("weight columns disagree on dimension"));
    }
    let gram = DMatrix::from_fn(k, k, |i, j| {
        columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram);
    let sqrt_vals = eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 });
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    let trace = root.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        let uniform = DMatrix::identity(k, k) / k as f64;
        return Ok(to_rows(&uniform));
    }
    Ok(to_rows(&(root / trace)))
}

/// Pseudo-inverse of a symmetric PSD matrix via eigendecomposition with a
/// relative eigenvalue cutoff.
fn psd_pinv(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = rows.len();
    let m = to_matrix(rows);
    let eig = SymmetricEigen::new(m);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    // the relationship matrix is a matrix square root, so eigendecomposition
    // noise at eps * max in the underlying Gram surfaces here at
    // sqrt(eps) * max; anything below that is rank deficiency, and inverting
    // it injects O(1/sqrt(eps)) garbage into the coupled gradients
    let cutoff = max_abs * k as f64 * f64::EPSILON.sqrt();
    let inv_vals = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    Ok(to_rows(&pinv))
}

pub fn run_mocha(ds: &FederatedDataset, arch: &ArchDescriptor, cfg: &MochaConfig) -> Result<MochaRun> {
    cfg.validate()?;
    arch.validate()?;
    if !arch.family.is_linear() {
        return Err(Error::config("task-relationship training supports linear families only"));
    }
    if ds.regime() != Regime::CrossSilo {
        return Err(Error::config("task-relationship training needs the cross-silo regime"));
    }
    let clients: Vec<_> = ds
        .sorted_clients()
        .into_iter()
        .filter(|c| !c.local_training_set().is_empty())
        .collect();
    if clients.is_empty() {
        return Err(Error::data("no clients with training examples"));
    }
    let k = clients.len();

    let init = models::init_params(arch, cfg.seed)?;
    let mut columns: Vec<ModelParams> = vec![init; k];
    let mut omega: Vec<Vec<f64>> = {
        let uniform = DMatrix::identity(k, k) / k as f64;
        to_rows(&uniform)
    };

    for outer in 1..=cfg.outer_iters {
        let pinv = psd_pinv(&omega)?;
        let snapshot: Vec<Vec<f64>> = columns.iter().map(|c| c.values.clone()).collect();

        columns = clients
            .par_iter()
            .enumerate()
            .map(|(idx, client)| {
                let local = client.local_training_set();
                let own_coef = pinv[idx][idx];
                // other clients' columns enter frozen at their start-of-
                // iteration values; only the own column stays live
                let mut cross = vec![0.0; snapshot[idx].len()];
                for (j, col) in snapshot.iter().enumerate() {
                    if j != idx {
                        let c = pinv[idx][j];
                        if c != 0.0 {
                            for (acc, w) in cross.iter_mut().zip(col) {
                                *acc += c * w;
                            }
                        }
                    }
                }
                let mut rng = StreamKey::new(cfg.seed)
                    .label("mocha")
                    .index(outer as u64)
                    .label(client.client_id.as_str())
                    .rng();
                let mut v = columns[idx].clone();
                for _ in 0..cfg.inner_epochs {
                    let mut order: Vec<usize> = (0..local.len()).collect();
                    for i in 0..order.len() {
                        let j = rng.gen_range(i..order.len());
                        order.swap(i, j);
                    }
                    for chunk in order.chunks(cfg.batch_size) {
                        let batch: Vec<&Example> = chunk.iter().map(|&i| local[i]).collect();
                        let mut grad = models::gradient(&v, &batch)?;
                        if cfg.lambda != 0.0 {
                            for ((g, vi), ci) in grad.iter_mut().zip(&v.values).zip(&cross) {
                                *g += cfg.lambda * (own_coef * vi + ci);
                            }
                        }
                        v = sgd_step(&v, &grad, cfg.client_lr)?;
                    }
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;

        let column_values: Vec<Vec<f64>> = columns.iter().map(|c| c.values.clone()).collect();
        omega = omega_update(&column_values)?;
    }

    let models_map: BTreeMap<ClientId, ModelParams> = clients
        .iter()
        .zip(columns)
        .map(|(c, m)| (c.client_id.clone(), m))
        .collect();
    Ok(MochaRun { models: models_map, omega })
}

/// Per-client metrics: the trained column against the shared untrained
/// initialization, which is the only model all clients hold in common here.
pub fn mocha_evaluate(ds: &FederatedDataset, run: &MochaRun, seed: u64) -> Result<PerClientMetrics> {
    let arch = match run.models.values().next() {
        Some(m) => m.arch,
        None => return Err(Error::data("evaluating an empty run")),
    };
    let reference = models::init_params(&arch, seed)?;
    let kind = arch.metric_kind();
    let jobs: Vec<_> = reporting_clients(ds)
        .into_iter()
        .filter(|c| run.models.contains_key(&c.client_id) && !ds.evaluation_set(c).is_empty())
        .collect();
    let records: Vec<ClientRecord> = jobs
        .par_iter()
        .map(|c| {
            let eval = ds.evaluation_set(c);
            Ok(ClientRecord {
                client_id: c.client_id.clone(),
                metric_before: models::evaluate_metric(&reference, &eval)?,
                metric_after: models::evaluate_metric(&run.models[&c.client_id], &eval)?,
                n_personalization: ds.personalization_set(c).len(),
                n_evaluation: eval.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = PerClientMetrics::new(kind);
    out.records = records;
    Ok(out)
}
