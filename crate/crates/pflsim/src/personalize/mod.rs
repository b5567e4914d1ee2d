//! Personalization strategies layered on top of (or replacing) federated
//! training: local-only training, post-hoc fine-tuning, clustered models,
//! nearest-neighbor interpolation and multi-task objectives.
//!
//! Shared conventions: hyperparameters are chosen on the selection
//! population (the validation clients cross-device, the valid-tagged
//! examples cross-silo) and results are reported on the reporting
//! population (test clients cross-device, every client's test-tagged
//! examples cross-silo). Each strategy produces per-client before/after
//! metrics where "before" scores the strategy's unpersonalized reference
//! model on the same held-out examples.

pub mod finetune;
pub mod hypcluster;
pub mod knn;
pub mod mtl;

use crate::datamodel::{ClientDataset, Example, FederatedDataset, MetricKind, Regime, Role, Split};

/// Clients whose personalized metrics an experiment reports.
pub fn reporting_clients(ds: &FederatedDataset) -> Vec<&ClientDataset> {
    match ds.regime() {
        Regime::CrossDevice => ds.clients_in_role(Role::Test),
        Regime::CrossSilo => ds.sorted_clients(),
    }
}

/// Clients used to choose hyperparameters such as the fine-tuning epoch.
pub fn selection_clients(ds: &FederatedDataset) -> Vec<&ClientDataset> {
    match ds.regime() {
        Regime::CrossDevice => ds.clients_in_role(Role::Valid),
        Regime::CrossSilo => ds.sorted_clients(),
    }
}

/// Held-out examples a selection client is scored on. Distinct from the
/// reporting examples cross-silo (valid tags, not test tags) so selection
/// never sees the reported set.
pub fn selection_eval_set<'a>(ds: &FederatedDataset, client: &'a ClientDataset) -> Vec<&'a Example> {
    match ds.regime() {
        Regime::CrossDevice => client.tagged(Split::Evaluation),
        Regime::CrossSilo => client.tagged(Split::Valid),
    }
}

/// Strict improvement in the metric's own direction.
pub(crate) fn strictly_better(kind: MetricKind, candidate: f64, incumbent: f64) -> bool {
    if kind.higher_is_better() {
        candidate > incumbent
    } else {
        candidate < incumbent
    }
}
