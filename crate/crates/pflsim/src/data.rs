//! Dataset construction: synthetic federations, CSV ingestion for silo
//! benchmarks, split assignment for both regimes, client sampling and
//! out-of-distribution pools.
//!
//! Everything is a pure function of its spec and seed. Per-client randomness
//! is drawn from a stream keyed by (seed, client_id), so regenerating a
//! single client never depends on how many clients came before it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ClientDataset, ClientId, ClientRoles, Example, FederatedDataset, Label, Role, Split, TaskKind,
};
use crate::error::{Error, Result};
use crate::models::{self, ArchDescriptor, ModelParams};
use crate::rng::StreamKey;

// ---------------------------------------------------------------------------
// Synthetic federations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Clients belong to one of several planted clusters, each with its own
    /// ground-truth model; labels carry a small amount of flip noise.
    PlantedClusters,
    /// One shared ground truth; clients differ in their class priors.
    LabelSkew,
    /// One shared ground truth; clients differ by a mean shift of their
    /// inputs (covariate shift only).
    LocalShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub num_clients: usize,
    /// (mean, spread): client sizes are uniform in [mean-spread, mean+spread],
    /// clamped to at least 1.
    pub examples_per_client: (usize, usize),
    pub feature_dim: usize,
    /// Number of classes, or 1 for a regression federation.
    pub num_classes: usize,
    pub num_planted_clusters: usize,
    /// Non-negative knob controlling how different clients are.
    /// For planted clusters it suppresses label noise (flip probability
    /// 0.5 * exp(-heterogeneity)), so values >= 5 make the planted models
    /// near-perfect oracles on their own clusters and recoverable by
    /// min-loss assignment. For label skew it sharpens per-client class
    /// priors (Dirichlet-like with concentration 1/heterogeneity; 0 means
    /// identical uniform priors). For local shift it is the input-mean shift
    /// magnitude.
    pub heterogeneity: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if self.examples_per_client.0 == 0 {
            return Err(Error::config("examples_per_client mean must be positive"));
        }
        if self.heterogeneity < 0.0 || !self.heterogeneity.is_finite() {
            return Err(Error::config("heterogeneity must be finite and non-negative"));
        }
        match self.kind {
            SynthKind::PlantedClusters => {
                if self.num_planted_clusters == 0 {
                    return Err(Error::config("num_planted_clusters must be >= 1"));
                }
            }
            SynthKind::LabelSkew => {
                if self.num_classes < 2 {
                    return Err(Error::config("label_skew requires a classification task"));
                }
            }
            SynthKind::LocalShift => {}
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1 (1 means regression)"));
        }
        Ok(())
    }

    pub fn task_kind(&self) -> TaskKind {
        if self.num_classes == 1 {
            TaskKind::Regression
        } else {
            TaskKind::Classification
        }
    }
}

/// What the generator planted; evaluation code can use it as an oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Clusters {
        assignments: BTreeMap<ClientId, usize>,
        models: Vec<ModelParams>,
    },
    SharedModel {
        model: ModelParams,
        shifts: BTreeMap<ClientId, Vec<f64>>,
    },
    ClassPriors {
        model_means: Vec<Vec<f64>>,
        priors: BTreeMap<ClientId, Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: FederatedDataset,
    pub truth: GroundTruth,
}

fn client_name(i: usize) -> ClientId {
    ClientId::new(format!("client_{i:05}"))
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..d).map(|_| n.sample(rng)).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = standard_normal_vec(rng, d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn client_size(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> usize {
    let (mean, spread) = spec.examples_per_client;
    let lo = mean.saturating_sub(spread).max(1);
    let hi = mean + spread;
    rng.gen_range(lo..=hi)
}

/// Ground-truth model with unit-variance scores on standard normal inputs.
fn truth_model(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> ModelParams {
    let d = spec.feature_dim;
    let scale = 1.0 / (d as f64).sqrt();
    if spec.task_kind() == TaskKind::Classification {
        let arch = ArchDescriptor::softmax(d, spec.num_classes, 0.0);
        let mut values = vec![0.0; arch.param_count()];
        for v in values[..spec.num_classes * d].iter_mut() {
            *v = Normal::new(0.0, scale).unwrap().sample(rng);
        }
        ModelParams::new(arch, values).unwrap()
    } else {
        let arch = ArchDescriptor::linear_regression(d, 0.0);
        let mut values = vec![0.0; arch.param_count()];
        for v in values[..d].iter_mut() {
            *v = Normal::new(0.0, scale).unwrap().sample(rng);
        }
        ModelParams::new(arch, values).unwrap()
    }
}

fn label_from_model(
    model: &ModelParams,
    x: &[f64],
    flip_p: f64,
    noise_sigma: f64,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Label {
    match model.arch.family.task_kind() {
        TaskKind::Classification => {
            let pred = models::predict(model, x).unwrap();
            let mut y = pred.argmax().unwrap();
            if flip_p > 0.0 && rng.gen::<f64>() < flip_p {
                y = rng.gen_range(0..num_classes);
            }
            Label::Class(y)
        }
        TaskKind::Regression => {
            let base = models::predict(model, x).unwrap().value().unwrap();
            let noise = if noise_sigma > 0.0 {
                Normal::new(0.0, noise_sigma).unwrap().sample(rng)
            } else {
                0.0
            };
            Label::Value(base + noise)
        }
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let d = spec.feature_dim;
    let task = spec.task_kind();

    match spec.kind {
        SynthKind::PlantedClusters => {
            let k = spec.num_planted_clusters;
            let models: Vec<ModelParams> = (0..k)
                .map(|c| {
                    let mut rng = StreamKey::new(spec.seed).label("truth").index(c as u64).rng();
                    truth_model(spec, &mut rng)
                })
                .collect();
            let flip_p = 0.5 * (-spec.heterogeneity).exp();
            let noise_sigma = 0.5 * (-spec.heterogeneity).exp();

            let mut clients = Vec::with_capacity(spec.num_clients);
            let mut assignments = BTreeMap::new();
            for i in 0..spec.num_clients {
                let id = client_name(i);
                let cluster = i % k;
                assignments.insert(id.clone(), cluster);
                let mut rng = StreamKey::new(spec.seed).label("client").label(id.as_str()).rng();
                let n = client_size(spec, &mut rng);
                let examples = (0..n)
                    .map(|_| {
                        let x = standard_normal_vec(&mut rng, d);
                        let label = label_from_model(
                            &models[cluster],
                            &x,
                            flip_p,
                            noise_sigma,
                            spec.num_classes,
                            &mut rng,
                        );
                        Example::new(x, label)
                    })
                    .collect();
                clients.push(ClientDataset::new(id, examples));
            }

            Ok(Synthetic {
                dataset: FederatedDataset {
                    clients,
                    task_kind: task,
                    feature_dim: d,
                    num_classes: spec.num_classes.max(1),
                    client_role: ClientRoles::All,
                },
                truth: GroundTruth::Clusters { assignments, models },
            })
        }

        SynthKind::LabelSkew => {
            let c = spec.num_classes;
            let mut global = StreamKey::new(spec.seed).label("classmeans").rng();
            let model_means: Vec<Vec<f64>> = (0..c)
                .map(|_| unit_vector(&mut global, d).into_iter().map(|v| 2.0 * v).collect())
                .collect();

            let mut clients = Vec::with_capacity(spec.num_clients);
            let mut priors_map = BTreeMap::new();
            for i in 0..spec.num_clients {
                let id = client_name(i);
                let mut rng = StreamKey::new(spec.seed).label("client").label(id.as_str()).rng();
                let prior = if spec.heterogeneity == 0.0 {
                    vec![1.0 / c as f64; c]
                } else {
                    let alpha = 1.0 / spec.heterogeneity;
                    let gamma = Gamma::new(alpha, 1.0)
                        .map_err(|e| Error::Numeric(format!("gamma sampler: {e}")))?;
                    let draws: Vec<f64> = (0..c).map(|_| gamma.sample(&mut rng)).collect();
                    let sum: f64 = draws.iter().sum();
                    if sum > 0.0 && sum.is_finite() {
                        draws.into_iter().map(|v| v / sum).collect()
                    } else {
                        // extreme concentration underflowed; degenerate prior
                        let hot = rng.gen_range(0..c);
                        (0..c).map(|j| if j == hot { 1.0 } else { 0.0 }).collect()
                    }
                };
                priors_map.insert(id.clone(), prior.clone());

                let n = client_size(spec, &mut rng);
                let examples = (0..n)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut y = c - 1;
                        for (j, p) in prior.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                y = j;
                                break;
                            }
                        }
                        let x: Vec<f64> = model_means[y]
                            .iter()
                            .map(|m| m + Normal::new(0.0, 1.0).unwrap().sample(&mut rng))
                            .collect();
                        Example::new(x, Label::Class(y))
                    })
                    .collect();
                clients.push(ClientDataset::new(id, examples));
            }

            Ok(Synthetic {
                dataset: FederatedDataset {
                    clients,
                    task_kind: TaskKind::Classification,
                    feature_dim: d,
                    num_classes: c,
                    client_role: ClientRoles::All,
                },
                truth: GroundTruth::ClassPriors { model_means, priors: priors_map },
            })
        }

        SynthKind::LocalShift => {
            let mut global = StreamKey::new(spec.seed).label("truth").rng();
            let model = truth_model(spec, &mut global);
            let noise_sigma = if task == TaskKind::Regression { 0.05 } else { 0.0 };

            let mut clients = Vec::with_capacity(spec.num_clients);
            let mut shifts = BTreeMap::new();
            for i in 0..spec.num_clients {
                let id = client_name(i);
                let mut rng = StreamKey::new(spec.seed).label("client").label(id.as_str()).rng();
                let shift: Vec<f64> = unit_vector(&mut rng, d)
                    .into_iter()
                    .map(|v| spec.heterogeneity * v)
                    .collect();
                shifts.insert(id.clone(), shift.clone());

                let n = client_size(spec, &mut rng);
                let examples = (0..n)
                    .map(|_| {
                        let x: Vec<f64> = shift
                            .iter()
                            .map(|s| s + Normal::new(0.0, 1.0).unwrap().sample(&mut rng))
                            .collect();
                        let label = label_from_model(
                            &model,
                            &x,
                            0.0,
                            noise_sigma,
                            spec.num_classes,
                            &mut rng,
                        );
                        Example::new(x, label)
                    })
                    .collect();
                clients.push(ClientDataset::new(id, examples));
            }

            Ok(Synthetic {
                dataset: FederatedDataset {
                    clients,
                    task_kind: task,
                    feature_dim: d,
                    num_classes: spec.num_classes.max(1),
                    client_role: ClientRoles::All,
                },
                truth: GroundTruth::SharedModel { model, shifts },
            })
        }
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion (silo benchmarks: one row per example, clients keyed by id)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub client_col: String,
    pub label_col: String,
    /// Explicit feature columns in order; `None` uses every remaining column
    /// in header order.
    pub feature_cols: Option<Vec<String>>,
    pub task_kind: TaskKind,
    /// Z-score each feature with statistics computed over the whole file.
    pub standardize: bool,
    /// Regression only: min-max scale labels into [0, 1] globally.
    pub normalize_labels: bool,
}

pub fn load_csv_silo(path: &Path, schema: &CsvSchema) -> Result<FederatedDataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("column {name:?} not found in {}", path.display())))
    };
    let client_idx = col_index(&schema.client_col)?;
    let label_idx = col_index(&schema.label_col)?;
    let feature_idx: Vec<usize> = match &schema.feature_cols {
        Some(cols) => cols.iter().map(|c| col_index(c)).collect::<Result<Vec<_>>>()?,
        None => (0..headers.len())
            .filter(|i| *i != client_idx && *i != label_idx)
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::data("no feature columns"));
    }

    let mut rows: Vec<(String, f64, Vec<f64>)> = Vec::new();
    for (rowno, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("row {}: {e}", rowno + 2)))?;
        let cell = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::data(format!("row {}: missing column {}", rowno + 2, i)))
        };
        let client = cell(client_idx)?.to_string();
        let label: f64 = cell(label_idx)?
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("row {}: label is not numeric", rowno + 2)))?;
        let mut features = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            let v: f64 = cell(i)?
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("row {}: feature {:?} is not numeric", rowno + 2, &headers[i])))?;
            features.push(v);
        }
        rows.push((client, label, features));
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{} contains no data rows", path.display())));
    }
    let d = rows[0].2.len();

    if schema.standardize {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for (_, _, x) in &rows {
            for j in 0..d {
                mean[j] += x[j];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for (_, _, x) in &rows {
            for j in 0..d {
                let c = x[j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        for (_, _, x) in &mut rows {
            for j in 0..d {
                x[j] -= mean[j];
                if std[j] > 0.0 {
                    x[j] /= std[j];
                }
            }
        }
    }

    let (task_kind, num_classes, labels): (TaskKind, usize, Vec<Label>) = match schema.task_kind {
        TaskKind::Classification => {
            let mut distinct: Vec<f64> = rows.iter().map(|(_, y, _)| *y).collect();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
            distinct.dedup();
            if distinct.len() < 2 {
                return Err(Error::data("classification file has fewer than 2 distinct labels"));
            }
            if distinct.iter().any(|v| !v.is_finite()) {
                return Err(Error::data("labels contain non-finite values"));
            }
            let labels = rows
                .iter()
                .map(|(_, y, _)| {
                    let k = distinct.iter().position(|v| v == y).unwrap();
                    Label::Class(k)
                })
                .collect();
            (TaskKind::Classification, distinct.len(), labels)
        }
        TaskKind::Regression => {
            let mut labels: Vec<f64> = rows.iter().map(|(_, y, _)| *y).collect();
            if schema.normalize_labels {
                let lo = labels.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    for y in &mut labels {
                        *y = (*y - lo) / (hi - lo);
                    }
                }
            }
            (TaskKind::Regression, 1, labels.into_iter().map(Label::Value).collect())
        }
    };

    let mut by_client: BTreeMap<ClientId, Vec<Example>> = BTreeMap::new();
    for ((client, _, features), label) in rows.into_iter().zip(labels) {
        by_client
            .entry(ClientId::new(client))
            .or_default()
            .push(Example::new(features, label));
    }

    Ok(FederatedDataset {
        clients: by_client
            .into_iter()
            .map(|(client_id, examples)| ClientDataset { client_id, examples, split_tags: None })
            .collect(),
        task_kind,
        feature_dim: d,
        num_classes,
        client_role: ClientRoles::All,
    })
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRegime {
    CrossDevice,
    CrossSilo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub regime: SplitRegime,
    /// Cross-device: fractions of clients made train/valid/test.
    pub client_fractions: (f64, f64, f64),
    /// Cross-silo: fractions of each client's examples tagged train/valid/test.
    pub local_fractions: (f64, f64, f64),
    /// Fraction of each held-out client's examples used for adaptation
    /// (cross-device only); the remainder is the evaluation set.
    pub personalization_fraction: f64,
    /// When true and every example carries a timestamp, the
    /// personalization/evaluation split is chronological: adaptation data is
    /// the oldest. Otherwise the split is a seeded shuffle.
    pub sort_by_time: bool,
    pub seed: u64,
}

impl SplitSpec {
    pub fn cross_device(client_fractions: (f64, f64, f64), seed: u64) -> Self {
        SplitSpec {
            regime: SplitRegime::CrossDevice,
            client_fractions,
            local_fractions: (0.7, 0.15, 0.15),
            personalization_fraction: 0.5,
            sort_by_time: false,
            seed,
        }
    }

    pub fn cross_silo(local_fractions: (f64, f64, f64), seed: u64) -> Self {
        SplitSpec {
            regime: SplitRegime::CrossSilo,
            client_fractions: (0.0, 0.0, 0.0),
            local_fractions,
            personalization_fraction: 0.5,
            sort_by_time: false,
            seed,
        }
    }
}

fn check_fractions(f: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = f;
    for v in [a, b, c] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::config("split fractions must lie in [0, 1]"));
        }
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    Ok(())
}

// floor with a tiny guard so that fractions like 400/3400 * 3400 land on the
// integer they name instead of one below it
fn floor_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor() as usize
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx
}

/// Partition clients into train/valid/test populations and split each held-out
/// client's examples into personalization and evaluation halves.
pub fn split_cross_device(ds: &FederatedDataset, spec: &SplitSpec) -> Result<FederatedDataset> {
    check_fractions(spec.client_fractions)?;
    let (f_train, f_valid, f_test) = spec.client_fractions;
    if f_train <= 0.0 || f_test <= 0.0 {
        return Err(Error::config("cross-device split needs train and test client fractions > 0"));
    }
    if !(spec.personalization_fraction > 0.0 && spec.personalization_fraction < 1.0) {
        return Err(Error::config("personalization_fraction must lie strictly in (0, 1)"));
    }

    let n = ds.clients.len();
    let n_valid = floor_count(f_valid, n);
    let n_test = floor_count(f_test, n);
    if n_valid + n_test >= n {
        return Err(Error::config("no clients left for the train population"));
    }
    let n_train = n - n_valid - n_test;

    let mut ids: Vec<ClientId> = ds.clients.iter().map(|c| c.client_id.clone()).collect();
    ids.sort();
    let mut rng = StreamKey::new(spec.seed).label("roles").rng();
    let order = shuffled_indices(ids.len(), &mut rng);

    let mut roles: BTreeMap<ClientId, Role> = BTreeMap::new();
    for (pos, &i) in order.iter().enumerate() {
        let role = if pos < n_train {
            Role::Train
        } else if pos < n_train + n_valid {
            Role::Valid
        } else {
            Role::Test
        };
        roles.insert(ids[i].clone(), role);
    }

    let mut clients = Vec::with_capacity(n);
    for c in &ds.clients {
        let role = roles[&c.client_id];
        let mut out = c.clone();
        out.split_tags = None;
        if matches!(role, Role::Valid | Role::Test) {
            let m = c.examples.len();
            if m < 2 {
                return Err(Error::data(format!(
                    "held-out client {:?} has {} examples; needs at least 2",
                    c.client_id.as_str(),
                    m
                )));
            }
            let have_time = c.examples.iter().all(|e| e.timestamp.is_some());
            let order: Vec<usize> = if spec.sort_by_time && have_time {
                let mut idx: Vec<usize> = (0..m).collect();
                idx.sort_by_key(|&i| (c.examples[i].timestamp.unwrap(), i));
                idx
            } else {
                let mut r = StreamKey::new(spec.seed)
                    .label("pers")
                    .label(c.client_id.as_str())
                    .rng();
                shuffled_indices(m, &mut r)
            };
            let n_eval = floor_count(1.0 - spec.personalization_fraction, m);
            let n_pers = m - n_eval;
            if n_pers == 0 || n_eval == 0 {
                return Err(Error::data(format!(
                    "held-out client {:?} would get an empty personalization or evaluation set",
                    c.client_id.as_str()
                )));
            }
            let mut tags = vec![Split::Evaluation; m];
            for &i in order.iter().take(n_pers) {
                tags[i] = Split::Personalization;
            }
            out.split_tags = Some(tags);
        }
        clients.push(out);
    }

    Ok(FederatedDataset {
        clients,
        task_kind: ds.task_kind,
        feature_dim: ds.feature_dim,
        num_classes: ds.num_classes,
        client_role: ClientRoles::PerClient(roles),
    })
}

/// Tag every client's examples train/valid/test. Remainders after the floor
/// go to the train portion; valid and test are never empty.
pub fn split_cross_silo(ds: &FederatedDataset, spec: &SplitSpec) -> Result<FederatedDataset> {
    check_fractions(spec.local_fractions)?;
    let (_, f_valid, f_test) = spec.local_fractions;
    if f_valid <= 0.0 || f_test <= 0.0 {
        return Err(Error::config(
            "cross-silo split cannot create empty valid/test portions; fractions must be > 0",
        ));
    }

    let mut clients = Vec::with_capacity(ds.clients.len());
    for c in &ds.clients {
        let m = c.examples.len();
        if m < 3 {
            return Err(Error::data(format!(
                "client {:?} has {} examples; cross-silo needs at least 3",
                c.client_id.as_str(),
                m
            )));
        }
        let n_valid = floor_count(f_valid, m).max(1);
        let n_test = floor_count(f_test, m).max(1);
        if n_valid + n_test >= m {
            return Err(Error::data(format!(
                "client {:?} is too small for the requested fractions",
                c.client_id.as_str()
            )));
        }
        let n_train = m - n_valid - n_test;

        let mut rng = StreamKey::new(spec.seed).label("silo").label(c.client_id.as_str()).rng();
        let order = shuffled_indices(m, &mut rng);
        let mut tags = vec![Split::Train; m];
        for (pos, &i) in order.iter().enumerate() {
            tags[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
        let mut out = c.clone();
        out.split_tags = Some(tags);
        clients.push(out);
    }

    Ok(FederatedDataset {
        clients,
        task_kind: ds.task_kind,
        feature_dim: ds.feature_dim,
        num_classes: ds.num_classes,
        client_role: ClientRoles::All,
    })
}

// ---------------------------------------------------------------------------
// Client sampling and OOD pools
// ---------------------------------------------------------------------------

/// Sample `n` distinct clients uniformly from the pool. A pure function of
/// (pool, n, round, seed); different rounds draw independent subsets.
pub fn sample_clients(pool: &[ClientId], n: usize, round: usize, seed: u64) -> Result<Vec<ClientId>> {
    if n > pool.len() {
        return Err(Error::config(format!(
            "cannot sample {} clients from a pool of {}",
            n,
            pool.len()
        )));
    }
    let mut sorted: Vec<ClientId> = pool.to_vec();
    sorted.sort();
    let mut rng = StreamKey::new(seed).label("sample").index(round as u64).rng();
    for i in 0..n {
        let j = rng.gen_range(i..sorted.len());
        sorted.swap(i, j);
    }
    sorted.truncate(n);
    Ok(sorted)
}

/// Pool `n` examples, without replacement, from the union of the test
/// clients' evaluation sets. `n` equal to the union size returns the whole
/// pool (in a seeded order).
pub fn build_ood_set(ds: &FederatedDataset, n: usize, seed: u64) -> Result<Vec<Example>> {
    let mut pool: Vec<Example> = Vec::new();
    for c in ds.clients_in_role(Role::Test) {
        for ex in ds.evaluation_set(c) {
            pool.push(ex.clone());
        }
    }
    if n > pool.len() {
        return Err(Error::config(format!(
            "requested {} examples but the pooled evaluation set holds {}",
            n,
            pool.len()
        )));
    }
    let mut rng = StreamKey::new(seed).label("ood").rng();
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}
