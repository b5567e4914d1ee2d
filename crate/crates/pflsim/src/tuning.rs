//! Hyperparameter grids. Two selection protocols: a global grid search that
//! scores whole configurations in canonical order, and per-client
//! fine-tuning selection where every client picks its own (learning rate,
//! epoch) pair on its validation examples and is then scored once on test.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ClientRecord, FederatedDataset, MetricKind, PerClientMetrics, Regime, Split,
};
use crate::error::{Error, Result};
use crate::models::{self, ModelParams};
use crate::personalize::finetune::{finetune_path, FinetuneConfig, FinetuneScope};
use crate::personalize::strictly_better;
use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl GridValue {
    pub fn as_f64(&self) -> Result<f64> {
        match self {
            GridValue::Float(v) => Ok(*v),
            GridValue::Int(v) => Ok(*v as f64),
            GridValue::Text(s) => Err(Error::config(format!("expected a number, found {s:?}"))),
        }
    }

    pub fn as_usize(&self) -> Result<usize> {
        match self {
            GridValue::Int(v) if *v >= 0 => Ok(*v as usize),
            GridValue::Int(v) => Err(Error::config(format!("expected a non-negative integer, found {v}"))),
            GridValue::Float(v) => Err(Error::config(format!("expected an integer, found {v}"))),
            GridValue::Text(s) => Err(Error::config(format!("expected an integer, found {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<GridValue>,
}

pub type GridPoint = BTreeMap<String, GridValue>;

/// Cartesian product in canonical order: axes vary in declaration order,
/// the last axis fastest. This order defines which point wins score ties.
pub fn grid_points(axes: &[GridAxis]) -> Result<Vec<GridPoint>> {
    if axes.is_empty() {
        return Err(Error::config("grid needs at least one axis"));
    }
    for axis in axes {
        if axis.values.is_empty() {
            return Err(Error::config(format!("grid axis {:?} has no values", axis.name)));
        }
    }
    let mut names: Vec<&str> = Vec::new();
    for axis in axes {
        if names.contains(&axis.name.as_str()) {
            return Err(Error::config(format!("duplicate grid axis {:?}", axis.name)));
        }
        names.push(&axis.name);
    }
    let mut points: Vec<GridPoint> = vec![GridPoint::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for v in &axis.values {
                let mut q = p.clone();
                q.insert(axis.name.clone(), v.clone());
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchOutcome {
    pub best_index: usize,
    pub best_point: GridPoint,
    pub best_score: f64,
    /// Score of every point in canonical order.
    pub scores: Vec<f64>,
}

/// Scores every point and keeps the best, ties to the earliest point in
/// canonical order.
pub fn grid_search<F>(axes: &[GridAxis], kind: MetricKind, mut score: F) -> Result<GridSearchOutcome>
where
    F: FnMut(&GridPoint) -> Result<f64>,
{
    let points = grid_points(axes)?;
    let mut scores = Vec::with_capacity(points.len());
    for p in &points {
        scores.push(score(p)?);
    }
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if strictly_better(kind, *s, scores[best]) {
            best = i;
        }
    }
    Ok(GridSearchOutcome {
        best_index: best,
        best_point: points[best].clone(),
        best_score: scores[best],
        scores,
    })
}

/// The grid each client searches when tuning its own fine-tuning recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClientGrid {
    pub lrs: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default)]
    pub scope: FinetuneScope,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl PerClientGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.epochs.is_empty() {
            return Err(Error::config("per-client grid needs learning rates and epochs"));
        }
        if self.lrs.iter().any(|lr| !(*lr > 0.0) || !lr.is_finite()) {
            return Err(Error::config("learning rates must be positive and finite"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientChoice {
    pub client_id: crate::datamodel::ClientId,
    pub lr: f64,
    pub epochs: usize,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClientTuningOutcome {
    pub choices: Vec<ClientChoice>,
    pub per_client: PerClientMetrics,
}

/// Every client fine-tunes from the shared model and picks its own
/// (lr, epochs) on its validation examples; only the chosen model touches
/// the test examples. Needs per-example tags, so cross-silo only. Ties
/// resolve in canonical order: earlier learning rate, then fewer epochs.
pub fn tune_finetune_per_client(
    ds: &FederatedDataset,
    start: &ModelParams,
    grid: &PerClientGrid,
    seed: u64,
) -> Result<PerClientTuningOutcome> {
    grid.validate()?;
    if ds.regime() != Regime::CrossSilo {
        return Err(Error::config("per-client tuning needs per-example tags (cross-silo)"));
    }
    let kind = start.arch.metric_kind();
    let max_epochs = *grid.epochs.iter().max().unwrap();
    let clients: Vec<_> = ds
        .sorted_clients()
        .into_iter()
        .filter(|c| {
            !c.tagged(Split::Train).is_empty()
                && !c.tagged(Split::Valid).is_empty()
                && !c.tagged(Split::Test).is_empty()
        })
        .collect();
    if clients.is_empty() {
        return Err(Error::data("no clients with train, valid and test examples"));
    }

    let results: Vec<(ClientChoice, ClientRecord)> = clients
        .par_iter()
        .map(|client| {
            let train = client.tagged(Split::Train);
            let valid = client.tagged(Split::Valid);
            let test = client.tagged(Split::Test);
            let mut best: Option<(f64, usize, f64, ModelParams)> = None;
            for &lr in &grid.lrs {
                let cfg = FinetuneConfig {
                    lr,
                    max_epochs,
                    scope: grid.scope,
                    batch_size: grid.batch_size,
                };
                let mut rng = StreamKey::new(seed)
                    .label("tune")
                    .label(client.client_id.as_str())
                    .index(lr.to_bits())
                    .rng();
                let path = finetune_path(start, &train, &cfg, &mut rng)?;
                for &e in &grid.epochs {
                    let m = models::evaluate_metric(&path[e], &valid)?;
                    let take = match &best {
                        None => true,
                        Some((_, _, incumbent, _)) => strictly_better(kind, m, *incumbent),
                    };
                    if take {
                        best = Some((lr, e, m, path[e].clone()));
                    }
                }
            }
            let (lr, epochs, valid_metric, chosen) = best.unwrap();
            let choice = ClientChoice { client_id: client.client_id.clone(), lr, epochs, valid_metric };
            let record = ClientRecord {
                client_id: client.client_id.clone(),
                metric_before: models::evaluate_metric(start, &test)?,
                metric_after: models::evaluate_metric(&chosen, &test)?,
                n_personalization: train.len(),
                n_evaluation: test.len(),
            };
            Ok((choice, record))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_client = PerClientMetrics::new(kind);
    let mut choices = Vec::with_capacity(results.len());
    for (choice, record) in results {
        per_client.records.push(record);
        choices.push(choice);
    }
    Ok(PerClientTuningOutcome { choices, per_client })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_cross_device, split_cross_silo, SplitSpec, SynthKind, SynthSpec};
    use crate::models::ArchDescriptor;

    fn axes() -> Vec<GridAxis> {
        vec![
            GridAxis {
                name: "lr".into(),
                values: vec![GridValue::Float(0.1), GridValue::Float(0.2)],
            },
            GridAxis { name: "epochs".into(), values: vec![GridValue::Int(1), GridValue::Int(3)] },
        ]
    }

    #[test]
    fn points_enumerate_last_axis_fastest() {
        let points = grid_points(&axes()).unwrap();
        assert_eq!(points.len(), 4);
        let flat: Vec<(f64, i64)> = points
            .iter()
            .map(|p| {
                let lr = p["lr"].as_f64().unwrap();
                let e = match p["epochs"] {
                    GridValue::Int(v) => v,
                    _ => unreachable!(),
                };
                (lr, e)
            })
            .collect();
        assert_eq!(flat, vec![(0.1, 1), (0.1, 3), (0.2, 1), (0.2, 3)]);
    }

    #[test]
    fn empty_axes_and_duplicates_are_rejected() {
        assert!(grid_points(&[]).is_err());
        assert!(grid_points(&[GridAxis { name: "a".into(), values: vec![] }]).is_err());
        let dup = vec![
            GridAxis { name: "a".into(), values: vec![GridValue::Int(1)] },
            GridAxis { name: "a".into(), values: vec![GridValue::Int(2)] },
        ];
        assert!(grid_points(&dup).is_err());
    }

    #[test]
    fn search_ties_go_to_the_earliest_point() {
        let scores = [0.7, 0.9, 0.9, 0.2];
        let out = grid_search(&axes(), MetricKind::Accuracy, |p| {
            let i = match (p["lr"].as_f64().unwrap(), p["epochs"].as_usize().unwrap()) {
                (lr, e) if lr < 0.15 && e == 1 => 0,
                (lr, _) if lr < 0.15 => 1,
                (_, 1) => 2,
                _ => 3,
            };
            Ok(scores[i])
        })
        .unwrap();
        assert_eq!(out.best_index, 1);
        assert_eq!(out.best_score, 0.9);
        assert_eq!(out.scores, scores.to_vec());
    }

    #[test]
    fn error_metrics_search_downhill() {
        let out = grid_search(&axes(), MetricKind::Mse, |p| Ok(p["lr"].as_f64().unwrap())).unwrap();
        assert_eq!(out.best_score, 0.1);
    }

    fn silo_fixture(seed: u64) -> FederatedDataset {
        let synth = generate_synthetic(&SynthSpec {
            kind: SynthKind::PlantedClusters,
            num_clients: 8,
            examples_per_client: (36, 6),
            feature_dim: 5,
            num_classes: 3,
            num_planted_clusters: 2,
            heterogeneity: 6.0,
            seed,
        })
        .unwrap();
        split_cross_silo(&synth.dataset, &SplitSpec::cross_silo((0.6, 0.2, 0.2), seed)).unwrap()
    }

    #[test]
    fn per_client_choices_stay_on_the_grid_and_help() {
        let ds = silo_fixture(9);
        let arch = ArchDescriptor::softmax(5, 3, 0.0);
        let start = ModelParams::zeros(arch);
        let grid = PerClientGrid {
            lrs: vec![0.05, 0.3],
            epochs: vec![0, 2, 8],
            scope: FinetuneScope::AllLayers,
            batch_size: None,
        };
        let out = tune_finetune_per_client(&ds, &start, &grid, 3).unwrap();
        assert_eq!(out.choices.len(), 8);
        for choice in &out.choices {
            assert!(grid.lrs.contains(&choice.lr));
            assert!(grid.epochs.contains(&choice.epochs));
        }
        let before: f64 = out.per_client.records.iter().map(|r| r.metric_before).sum::<f64>() / 8.0;
        let after: f64 = out.per_client.records.iter().map(|r| r.metric_after).sum::<f64>() / 8.0;
        assert!(after > before, "{before} -> {after}");

        let again = tune_finetune_per_client(&ds, &start, &grid, 3).unwrap();
        assert_eq!(out.choices, again.choices);
        assert_eq!(out.per_client, again.per_client);
    }

    #[test]
    fn per_client_tuning_rejects_cross_device() {
        let synth = generate_synthetic(&SynthSpec {
            kind: SynthKind::PlantedClusters,
            num_clients: 12,
            examples_per_client: (20, 4),
            feature_dim: 5,
            num_classes: 3,
            num_planted_clusters: 2,
            heterogeneity: 4.0,
            seed: 2,
        })
        .unwrap();
        let device =
            split_cross_device(&synth.dataset, &SplitSpec::cross_device((0.6, 0.2, 0.2), 2)).unwrap();
        let arch = ArchDescriptor::softmax(5, 3, 0.0);
        let start = ModelParams::zeros(arch);
        let grid = PerClientGrid {
            lrs: vec![0.1],
            epochs: vec![1],
            scope: FinetuneScope::AllLayers,
            batch_size: None,
        };
        assert!(tune_finetune_per_client(&device, &start, &grid, 1).is_err());
    }
}
