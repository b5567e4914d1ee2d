//! Core value types shared across the framework.
//!
//! Everything here is an immutable value object: operations that "modify" a
//! dataset return a new one. Client ids are opaque strings and all maps keyed
//! by them are ordered (`BTreeMap`), so iteration order is deterministic and
//! never depends on hash state.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque client identifier. Ordering is plain string ordering, which defines
/// the canonical client order everywhere (aggregation, reports, sampling pools).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub String);

impl ClientId {
    pub fn new(s: impl Into<String>) -> Self {
        ClientId(s.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Label of a single example: a class index for classification tasks or a
/// real scalar for regression tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Result<usize> {
        match self {
            Label::Class(c) => Ok(*c),
            Label::Value(v) => Err(Error::data(format!(
                "expected a class label, found scalar {v}"
            ))),
        }
    }

    pub fn value(&self) -> Result<f64> {
        match self {
            Label::Value(v) => Ok(*v),
            Label::Class(c) => Err(Error::data(format!(
                "expected a scalar label, found class {c}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: Label,
    /// Optional event time; used only when a split asks for time ordering.
    pub timestamp: Option<i64>,
}

impl Example {
    pub fn new(features: Vec<f64>, label: Label) -> Self {
        Example { features, label, timestamp: None }
    }
}

/// Per-example split tag. Cross-silo uses {Train, Valid, Test}; the held-out
/// clients of a cross-device split use {Personalization, Evaluation}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
    Personalization,
    Evaluation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Personalization => "personalization",
            Split::Evaluation => "evaluation",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            "personalization" => Ok(Split::Personalization),
            "evaluation" => Ok(Split::Evaluation),
            other => Err(Error::data(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub examples: Vec<Example>,
    /// When present, assigns each example to exactly one split; must be the
    /// same length as `examples`.
    pub split_tags: Option<Vec<Split>>,
}

impl ClientDataset {
    pub fn new(client_id: ClientId, examples: Vec<Example>) -> Self {
        ClientDataset { client_id, examples, split_tags: None }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples carrying the given tag, in stored order. Empty when the
    /// client is untagged.
    pub fn tagged(&self, split: Split) -> Vec<&Example> {
        match &self.split_tags {
            None => Vec::new(),
            Some(tags) => self
                .examples
                .iter()
                .zip(tags)
                .filter(|(_, t)| **t == split)
                .map(|(e, _)| e)
                .collect(),
        }
    }

    /// The data a client trains on during federated rounds: train-tagged
    /// examples when tags exist, otherwise everything it holds.
    pub fn local_training_set(&self) -> Vec<&Example> {
        match &self.split_tags {
            None => self.examples.iter().collect(),
            Some(_) => self.tagged(Split::Train),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Which population a cross-device client belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Valid,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Valid => "valid",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "train" => Ok(Role::Train),
            "valid" => Ok(Role::Valid),
            "test" => Ok(Role::Test),
            other => Err(Error::data(format!("unknown client role {other:?}"))),
        }
    }
}

/// Client-level role assignment. `All` means every client participates in
/// training and carries per-example train/valid/test tags (cross-silo);
/// `PerClient` partitions clients into disjoint populations (cross-device).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClientRoles {
    All,
    PerClient(BTreeMap<ClientId, Role>),
}

/// The federation regime implied by the role assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    CrossDevice,
    CrossSilo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub clients: Vec<ClientDataset>,
    pub task_kind: TaskKind,
    pub feature_dim: usize,
    /// Number of classes for classification; 1 for regression.
    pub num_classes: usize,
    pub client_role: ClientRoles,
}

impl FederatedDataset {
    pub fn regime(&self) -> Regime {
        match self.client_role {
            ClientRoles::All => Regime::CrossSilo,
            ClientRoles::PerClient(_) => Regime::CrossDevice,
        }
    }

    pub fn client(&self, id: &ClientId) -> Option<&ClientDataset> {
        self.clients.iter().find(|c| &c.client_id == id)
    }

    /// All clients in ascending client-id order.
    pub fn sorted_clients(&self) -> Vec<&ClientDataset> {
        let mut out: Vec<&ClientDataset> = self.clients.iter().collect();
        out.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        out
    }

    /// Clients holding the given role, ascending by id. In the cross-silo
    /// regime every client holds every role.
    pub fn clients_in_role(&self, role: Role) -> Vec<&ClientDataset> {
        match &self.client_role {
            ClientRoles::All => self.sorted_clients(),
            ClientRoles::PerClient(map) => {
                let mut out: Vec<&ClientDataset> = self
                    .clients
                    .iter()
                    .filter(|c| map.get(&c.client_id) == Some(&role))
                    .collect();
                out.sort_by(|a, b| a.client_id.cmp(&b.client_id));
                out
            }
        }
    }

    /// The set a client adapts on at evaluation time: the personalization
    /// tags cross-device, the train tags cross-silo.
    pub fn personalization_set<'a>(&self, client: &'a ClientDataset) -> Vec<&'a Example> {
        match self.regime() {
            Regime::CrossDevice => client.tagged(Split::Personalization),
            Regime::CrossSilo => client.tagged(Split::Train),
        }
    }

    /// The held-out set a client is scored on: the evaluation tags
    /// cross-device, the test tags cross-silo.
    pub fn evaluation_set<'a>(&self, client: &'a ClientDataset) -> Vec<&'a Example> {
        match self.regime() {
            Regime::CrossDevice => client.tagged(Split::Evaluation),
            Regime::CrossSilo => client.tagged(Split::Test),
        }
    }

    pub fn total_examples(&self) -> usize {
        self.clients.iter().map(|c| c.len()).sum()
    }
}

/// Per-client before/after metrics produced by a personalization evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Mse,
}

impl MetricKind {
    /// True when larger values are better.
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Accuracy)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: ClientId,
    pub metric_before: f64,
    pub metric_after: f64,
    pub n_personalization: usize,
    pub n_evaluation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClientMetrics {
    pub metric_kind: MetricKind,
    pub records: Vec<ClientRecord>,
}

impl PerClientMetrics {
    pub fn new(metric_kind: MetricKind) -> Self {
        PerClientMetrics { metric_kind, records: Vec::new() }
    }
}

/// What one training round exchanged. Parameter counts are scalars sent over
/// the wire (number of f64 values), not bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub sampled_client_ids: Vec<ClientId>,
    pub params_broadcast: u64,
    pub params_uploaded: u64,
    pub cluster_assignments: Option<BTreeMap<ClientId, usize>>,
}

/// Check every structural invariant of a dataset and report violations as
/// human-readable strings. Pure; an empty report means the dataset is valid.
pub fn validate_dataset(ds: &FederatedDataset) -> Vec<String> {
    let mut report = Vec::new();

    if ds.clients.is_empty() {
        report.push("dataset has no clients".to_string());
    }
    if ds.feature_dim == 0 {
        report.push("feature_dim is zero".to_string());
    }
    match ds.task_kind {
        TaskKind::Classification => {
            if ds.num_classes < 2 {
                report.push(format!(
                    "classification dataset must have >= 2 classes, found {}",
                    ds.num_classes
                ));
            }
        }
        TaskKind::Regression => {
            if ds.num_classes != 1 {
                report.push(format!(
                    "regression dataset must declare num_classes = 1, found {}",
                    ds.num_classes
                ));
            }
        }
    }

    let mut seen = std::collections::BTreeSet::new();
    for c in &ds.clients {
        if !seen.insert(&c.client_id) {
            report.push(format!("duplicate client id {:?}", c.client_id.as_str()));
        }
        if c.examples.is_empty() {
            report.push(format!("client {:?} has no examples", c.client_id.as_str()));
        }
        for (i, ex) in c.examples.iter().enumerate() {
            if ex.features.len() != ds.feature_dim {
                report.push(format!(
                    "client {:?} example {} has {} features, expected {}",
                    c.client_id.as_str(),
                    i,
                    ex.features.len(),
                    ds.feature_dim
                ));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                report.push(format!(
                    "client {:?} example {} has non-finite features",
                    c.client_id.as_str(),
                    i
                ));
            }
            match (ds.task_kind, &ex.label) {
                (TaskKind::Classification, Label::Class(k)) => {
                    if *k >= ds.num_classes {
                        report.push(format!(
                            "client {:?} example {} has class {} out of range 0..{}",
                            c.client_id.as_str(),
                            i,
                            k,
                            ds.num_classes
                        ));
                    }
                }
                (TaskKind::Classification, Label::Value(_)) => {
                    report.push(format!(
                        "client {:?} example {} has a scalar label in a classification dataset",
                        c.client_id.as_str(),
                        i
                    ));
                }
                (TaskKind::Regression, Label::Class(_)) => {
                    report.push(format!(
                        "client {:?} example {} has a class label in a regression dataset",
                        c.client_id.as_str(),
                        i
                    ));
                }
                (TaskKind::Regression, Label::Value(v)) => {
                    if !v.is_finite() {
                        report.push(format!(
                            "client {:?} example {} has a non-finite label",
                            c.client_id.as_str(),
                            i
                        ));
                    }
                }
            }
        }
        if let Some(tags) = &c.split_tags {
            if tags.len() != c.examples.len() {
                report.push(format!(
                    "client {:?} has {} split tags for {} examples",
                    c.client_id.as_str(),
                    tags.len(),
                    c.examples.len()
                ));
            }
        }
    }

    if let ClientRoles::PerClient(map) = &ds.client_role {
        for c in &ds.clients {
            if !map.contains_key(&c.client_id) {
                report.push(format!(
                    "client {:?} has no role assignment",
                    c.client_id.as_str()
                ));
            }
        }
        for id in map.keys() {
            if ds.client(id).is_none() {
                report.push(format!(
                    "role map mentions unknown client {:?}",
                    id.as_str()
                ));
            }
        }
    }

    report
}

// ---------------------------------------------------------------------------
// On-disk format: JSON lines, one client object per line.
//
//   {"client_id": "...", "examples": [{"x": [...], "y": <int|float>, "t": 3}],
//    "role": "train", "tags": ["personalization", ...]}
//
// `y` is written as a JSON integer for class labels and a JSON float for
// regression targets, which is also how the reader tells the task kinds
// apart. Dataset-level fields are reconstructed on read: feature_dim from the
// examples, num_classes as (max class index + 1). A dataset on disk therefore
// declares exactly the label range it uses.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    x: Vec<f64>,
    y: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<i64>,
}

#[derive(Serialize, Deserialize)]
struct ClientLine {
    client_id: String,
    examples: Vec<ExampleLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<String>>,
}

pub fn write_dataset(ds: &FederatedDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for c in &ds.clients {
        let role = match &ds.client_role {
            ClientRoles::All => None,
            ClientRoles::PerClient(map) => {
                map.get(&c.client_id).map(|r| r.as_str().to_string())
            }
        };
        let line = ClientLine {
            client_id: c.client_id.as_str().to_string(),
            examples: c
                .examples
                .iter()
                .map(|e| ExampleLine {
                    x: e.features.clone(),
                    y: match e.label {
                        Label::Class(k) => serde_json::Value::from(k as u64),
                        Label::Value(v) => serde_json::Value::from(v),
                    },
                    t: e.timestamp,
                })
                .collect(),
            role,
            tags: c
                .split_tags
                .as_ref()
                .map(|tags| tags.iter().map(|t| t.as_str().to_string()).collect()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<FederatedDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut clients = Vec::new();
    let mut roles: BTreeMap<ClientId, Role> = BTreeMap::new();
    let mut any_role = false;
    let mut any_float = false;
    let mut any_class = false;
    let mut max_class = 0usize;
    let mut feature_dim: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ClientLine = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("line {}: {}", lineno + 1, e))
        })?;
        let id = ClientId::new(parsed.client_id);

        let mut examples = Vec::with_capacity(parsed.examples.len());
        for (i, ex) in parsed.examples.into_iter().enumerate() {
            let label = if let Some(u) = ex.y.as_u64() {
                any_class = true;
                max_class = max_class.max(u as usize);
                Label::Class(u as usize)
            } else if let Some(f) = ex.y.as_f64() {
                any_float = true;
                Label::Value(f)
            } else {
                return Err(Error::data(format!(
                    "client {:?} example {}: label must be a number",
                    id.as_str(),
                    i
                )));
            };
            if let Some(d) = feature_dim {
                if ex.x.len() != d {
                    return Err(Error::data(format!(
                        "client {:?} example {}: {} features, expected {}",
                        id.as_str(),
                        i,
                        ex.x.len(),
                        d
                    )));
                }
            } else {
                feature_dim = Some(ex.x.len());
            }
            examples.push(Example { features: ex.x, label, timestamp: ex.t });
        }

        let split_tags = match parsed.tags {
            None => None,
            Some(tags) => {
                if tags.len() != examples.len() {
                    return Err(Error::data(format!(
                        "client {:?}: {} tags for {} examples",
                        id.as_str(),
                        tags.len(),
                        examples.len()
                    )));
                }
                Some(tags.iter().map(|t| Split::parse(t)).collect::<Result<Vec<_>>>()?)
            }
        };

        if let Some(role) = parsed.role {
            roles.insert(id.clone(), Role::parse(&role)?);
            any_role = true;
        }

        clients.push(ClientDataset { client_id: id, examples, split_tags });
    }

    if clients.is_empty() {
        return Err(Error::data("dataset file contains no clients"));
    }
    if any_class && any_float {
        return Err(Error::data(
            "dataset mixes integer and float labels; tasks cannot be mixed",
        ));
    }
    let (task_kind, num_classes) = if any_float {
        (TaskKind::Regression, 1)
    } else {
        (TaskKind::Classification, max_class + 1)
    };
    let client_role = if any_role {
        if roles.len() != clients.len() {
            return Err(Error::data(
                "either every client line carries a role or none does",
            ));
        }
        ClientRoles::PerClient(roles)
    } else {
        ClientRoles::All
    };

    Ok(FederatedDataset {
        clients,
        task_kind,
        feature_dim: feature_dim.unwrap_or(0),
        num_classes,
        client_role,
    })
}
