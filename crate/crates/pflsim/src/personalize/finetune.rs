//! Post-hoc fine-tuning: each client continues gradient descent on its own
//! personalization examples starting from a shared model. The number of
//! epochs is chosen once, server-side, from the selection population's mean
//! metric curve; epoch 0 keeps the shared model, so a client population that
//! does not benefit can decline personalization entirely.
//!
//! Local-only training is the same procedure started from the shared random
//! initialization instead of a trained global model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ClientId, Example, FederatedDataset, MetricKind, PerClientMetrics};
use crate::error::{Error, Result};
use crate::models::{self, ArchDescriptor, ModelParams};
use crate::optim::sgd_step;
use crate::personalize::{reporting_clients, selection_clients, selection_eval_set, strictly_better};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    AllLayers,
    /// Only the output layer moves; everything else stays bitwise intact.
    LastLayer,
}

impl Default for FinetuneScope {
    fn default() -> Self {
        FinetuneScope::AllLayers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub scope: FinetuneScope,
    /// Full-batch gradient steps when absent; shuffled minibatches otherwise.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl FinetuneConfig {
    pub fn new(lr: f64, max_epochs: usize) -> Self {
        FinetuneConfig { lr, max_epochs, scope: FinetuneScope::AllLayers, batch_size: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("finetune lr must be positive and finite"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("finetune batch_size must be positive"));
        }
        Ok(())
    }
}

fn mask_to_scope(grad: &mut [f64], arch: &ArchDescriptor, scope: FinetuneScope) {
    if scope == FinetuneScope::LastLayer {
        let keep = arch.last_layer_range();
        for (i, g) in grad.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *g = 0.0;
            }
        }
    }
}

/// Fine-tunes for `max_epochs` epochs and returns the parameter snapshot
/// after every epoch, index 0 being the untouched start.
pub fn finetune_path(
    start: &ModelParams,
    personalization: &[&Example],
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ModelParams>> {
    cfg.validate()?;
    if personalization.is_empty() {
        return Err(Error::data("finetune on an empty personalization set"));
    }
    let mut snapshots = Vec::with_capacity(cfg.max_epochs + 1);
    snapshots.push(start.clone());
    let mut params = start.clone();
    for _ in 0..cfg.max_epochs {
        match cfg.batch_size {
            None => {
                let mut grad = models::gradient(&params, personalization)?;
                mask_to_scope(&mut grad, &params.arch, cfg.scope);
                params = sgd_step(&params, &grad, cfg.lr)?;
            }
            Some(bs) => {
                let mut order: Vec<usize> = (0..personalization.len()).collect();
                for i in 0..order.len() {
                    let j = rng.gen_range(i..order.len());
                    order.swap(i, j);
                }
                for chunk in order.chunks(bs) {
                    let batch: Vec<&Example> = chunk.iter().map(|&i| personalization[i]).collect();
                    let mut grad = models::gradient(&params, &batch)?;
                    mask_to_scope(&mut grad, &params.arch, cfg.scope);
                    params = sgd_step(&params, &grad, cfg.lr)?;
                }
            }
        }
        snapshots.push(params.clone());
    }
    Ok(snapshots)
}

/// Index of the best entry in a per-epoch metric curve; ties resolve to the
/// smallest epoch so personalization is never bought without improvement.
pub fn select_best_epoch(curve: &[f64], kind: MetricKind) -> usize {
    let mut best = 0;
    for (i, &m) in curve.iter().enumerate().skip(1) {
        if strictly_better(kind, m, curve[best]) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub best_epoch: usize,
    /// Mean selection-population metric per epoch, 0..=max_epochs.
    pub epoch_curve: Vec<f64>,
    pub per_client: PerClientMetrics,
    /// Clients left out for lacking personalization or held-out examples.
    pub skipped: usize,
}

fn client_stream(seed: u64, id: &ClientId) -> ChaCha8Rng {
    StreamKey::new(seed).label("finetune").label(id.as_str()).rng()
}

/// Runs the full fine-tuning protocol from a shared starting model: build
/// each selection client's epoch curve, pick one epoch for everyone, then
/// report per-client before/after metrics on the reporting population.
pub fn finetune_evaluate(
    ds: &FederatedDataset,
    start: &ModelParams,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let kind = start.arch.metric_kind();
    let mut skipped = 0usize;

    // paths are reused when the selection and reporting populations overlap
    let mut paths: BTreeMap<ClientId, Vec<ModelParams>> = BTreeMap::new();

    let selection: Vec<_> = selection_clients(ds);
    let mut curves: Vec<Vec<f64>> = Vec::new();
    let sel_jobs: Vec<_> = selection
        .iter()
        .filter_map(|c| {
            let pers = ds.personalization_set(c);
            let held = selection_eval_set(ds, c);
            if pers.is_empty() || held.is_empty() {
                skipped += 1;
                None
            } else {
                Some((c.client_id.clone(), pers, held))
            }
        })
        .collect();
    if sel_jobs.is_empty() {
        return Err(Error::data("no selection clients with usable examples"));
    }
    let sel_results: Vec<(ClientId, Vec<ModelParams>, Vec<f64>)> = sel_jobs
        .par_iter()
        .map(|(id, pers, held)| {
            let mut rng = client_stream(seed, id);
            let path = finetune_path(start, pers, cfg, &mut rng)?;
            let curve = path
                .iter()
                .map(|p| models::evaluate_metric(p, held))
                .collect::<Result<Vec<f64>>>()?;
            Ok((id.clone(), path, curve))
        })
        .collect::<Result<Vec<_>>>()?;
    for (id, path, curve) in sel_results {
        paths.insert(id, path);
        curves.push(curve);
    }

    let epochs = cfg.max_epochs + 1;
    let mut epoch_curve = vec![0.0; epochs];
    for curve in &curves {
        for (acc, m) in epoch_curve.iter_mut().zip(curve) {
            *acc += m;
        }
    }
    for acc in &mut epoch_curve {
        *acc /= curves.len() as f64;
    }
    let best_epoch = select_best_epoch(&epoch_curve, kind);

    let mut per_client = PerClientMetrics::new(kind);
    let rep_jobs: Vec<_> = reporting_clients(ds)
        .iter()
        .filter_map(|c| {
            let pers = ds.personalization_set(c);
            let eval = ds.evaluation_set(c);
            if pers.is_empty() || eval.is_empty() {
                skipped += 1;
                None
            } else {
                Some((c.client_id.clone(), pers, eval))
            }
        })
        .collect();
    let records: Vec<crate::datamodel::ClientRecord> = rep_jobs
        .par_iter()
        .map(|(id, pers, eval)| {
            let path = match paths.get(id) {
                Some(p) => p.clone(),
                None => {
                    let mut rng = client_stream(seed, id);
                    finetune_path(start, pers, cfg, &mut rng)?
                }
            };
            Ok(crate::datamodel::ClientRecord {
                client_id: id.clone(),
                metric_before: models::evaluate_metric(start, eval)?,
                metric_after: models::evaluate_metric(&path[best_epoch], eval)?,
                n_personalization: pers.len(),
                n_evaluation: eval.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    per_client.records = records;

    Ok(FinetuneOutcome { best_epoch, epoch_curve, per_client, skipped })
}

/// Local-only baseline: every client fine-tunes from the shared random
/// initialization, never from a federated model.
pub fn local_training_evaluate(
    ds: &FederatedDataset,
    arch: &ArchDescriptor,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let init = models::init_params(arch, seed)?;
    finetune_evaluate(ds, &init, cfg, seed)
}
