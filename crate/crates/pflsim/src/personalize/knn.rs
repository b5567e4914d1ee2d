//! Nearest-neighbor personalization: a client stores the global model's
//! representation of each personalization example, then blends the global
//! prediction with a k-nearest-neighbor estimate in representation space.
//! The model itself never changes; personalization lives entirely in the
//! per-client store and the mixing coefficient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ClientRecord, Example, FederatedDataset, Label, MetricKind, PerClientMetrics, TaskKind,
};
use crate::error::{Error, Result};
use crate::models::{self, ModelParams, Prediction};
use crate::personalize::reporting_clients;

pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    /// Neighbors consulted per prediction, capped at the store size.
    pub k: usize,
    /// Weight on the neighbor estimate; 0 leaves the global prediction
    /// untouched, 1 ignores the global head entirely.
    pub coef: f64,
}

impl KnnConfig {
    pub fn new(coef: f64) -> Self {
        KnnConfig { k: DEFAULT_NEIGHBORS, coef }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("neighbor count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.coef) {
            return Err(Error::config("mixing coefficient must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Representation-space memory of one client's personalization examples.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnStore {
    reps: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

impl KnnStore {
    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    /// Indices of the k nearest stored points by squared Euclidean
    /// distance; equal distances resolve to the lower insertion index.
    fn neighbors(&self, rep: &[f64], k: usize) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self
            .reps
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d2: f64 = r.iter().zip(rep).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        order.truncate(k.min(order.len()));
        order.into_iter().map(|(_, i)| i).collect()
    }
}

pub fn build_store(global: &ModelParams, personalization: &[&Example]) -> Result<KnnStore> {
    if personalization.is_empty() {
        return Err(Error::data("neighbor store from an empty personalization set"));
    }
    let reps = personalization
        .iter()
        .map(|e| models::representation(global, &e.features))
        .collect::<Result<Vec<_>>>()?;
    let labels = personalization.iter().map(|e| e.label.clone()).collect();
    Ok(KnnStore { reps, labels })
}

/// Blended prediction. With coef = 0 this returns the global model's
/// prediction exactly, bypassing the neighbor machinery.
pub fn knn_predict(
    global: &ModelParams,
    store: &KnnStore,
    cfg: &KnnConfig,
    x: &[f64],
) -> Result<Prediction> {
    cfg.validate()?;
    let base = models::predict(global, x)?;
    if cfg.coef == 0.0 {
        return Ok(base);
    }
    if store.is_empty() {
        return Err(Error::data("prediction against an empty neighbor store"));
    }
    let rep = models::representation(global, x)?;
    let picked = store.neighbors(&rep, cfg.k);
    match global.arch.family.task_kind() {
        TaskKind::Classification => {
            let num_classes = global.arch.num_classes;
            let mut neighbor_probs = vec![0.0; num_classes];
            for &i in &picked {
                neighbor_probs[store.labels[i].class()?] += 1.0;
            }
            for p in &mut neighbor_probs {
                *p /= picked.len() as f64;
            }
            let base_probs = base.probs()?;
            let mixed: Vec<f64> = neighbor_probs
                .iter()
                .zip(base_probs)
                .map(|(n, g)| cfg.coef * n + (1.0 - cfg.coef) * g)
                .collect();
            Ok(Prediction::Classification { scores: mixed.clone(), probs: mixed })
        }
        TaskKind::Regression => {
            let mean: f64 =
                picked.iter().map(|&i| store.labels[i].value()).sum::<Result<f64>>()?
                    / picked.len() as f64;
            Ok(Prediction::Regression(cfg.coef * mean + (1.0 - cfg.coef) * base.value()?))
        }
    }
}

/// Metric of the blended predictor over a set of examples.
pub fn knn_metric(
    global: &ModelParams,
    store: &KnnStore,
    cfg: &KnnConfig,
    examples: &[&Example],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::data("metric over an empty example set"));
    }
    let kind = global.arch.metric_kind();
    let mut total = 0.0;
    for e in examples {
        let pred = knn_predict(global, store, cfg, &e.features)?;
        total += match kind {
            MetricKind::Accuracy => {
                if pred.argmax()? == e.label.class()? {
                    1.0
                } else {
                    0.0
                }
            }
            MetricKind::Mse => {
                let diff = pred.value()? - e.label.value()?;
                diff * diff
            }
        };
    }
    Ok(total / examples.len() as f64)
}

/// Per-client before/after metrics on the reporting population; "before"
/// is the unblended global model on the same examples.
pub fn knn_evaluate(
    ds: &FederatedDataset,
    global: &ModelParams,
    cfg: &KnnConfig,
) -> Result<PerClientMetrics> {
    cfg.validate()?;
    let jobs: Vec<_> = reporting_clients(ds)
        .into_iter()
        .filter(|c| !ds.personalization_set(c).is_empty() && !ds.evaluation_set(c).is_empty())
        .collect();
    let records: Vec<ClientRecord> = jobs
        .par_iter()
        .map(|c| {
            let pers = ds.personalization_set(c);
            let eval = ds.evaluation_set(c);
            let store = build_store(global, &pers)?;
            Ok(ClientRecord {
                client_id: c.client_id.clone(),
                metric_before: models::evaluate_metric(global, &eval)?,
                metric_after: knn_metric(global, &store, cfg, &eval)?,
                n_personalization: pers.len(),
                n_evaluation: eval.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = PerClientMetrics::new(global.arch.metric_kind());
    out.records = records;
    Ok(out)
}
