//! Turning per-client records into the numbers experiments report: summary
//! statistics with hurt/helped accounting, cross-seed aggregation, the
//! in-distribution versus out-of-distribution tradeoff curve, cumulative
//! communication cost and the personalization-budget sweep.

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ClientDataset, Example, FederatedDataset, MetricKind, PerClientMetrics, RoundTrace, Split,
};
use crate::error::{Error, Result};
use crate::models::{self, ModelParams};
use crate::personalize::strictly_better;
use crate::rng::StreamKey;
use rand::Rng;

/// Population statistics of one run's per-client records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_clients: usize,
    pub metric_kind: MetricKind,
    pub mean_before: f64,
    pub mean_after: f64,
    pub std_before: f64,
    pub std_after: f64,
    /// Percent of clients strictly better off after personalization.
    pub pct_helped: f64,
    /// Percent strictly worse off; the headline risk number.
    pub pct_hurt: f64,
    pub pct_unchanged: f64,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    // summing in sorted order makes the result a function of the multiset,
    // not of the record order
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(metrics: &PerClientMetrics) -> Result<Summary> {
    if metrics.records.is_empty() {
        return Err(Error::data("summary over zero clients"));
    }
    let kind = metrics.metric_kind;
    let before: Vec<f64> = metrics.records.iter().map(|r| r.metric_before).collect();
    let after: Vec<f64> = metrics.records.iter().map(|r| r.metric_after).collect();
    let (mean_before, std_before) = mean_and_std(&before);
    let (mean_after, std_after) = mean_and_std(&after);
    let n = metrics.records.len();
    let helped = metrics
        .records
        .iter()
        .filter(|r| strictly_better(kind, r.metric_after, r.metric_before))
        .count();
    let hurt = metrics
        .records
        .iter()
        .filter(|r| strictly_better(kind, r.metric_before, r.metric_after))
        .count();
    let pct_helped = 100.0 * helped as f64 / n as f64;
    let pct_hurt = 100.0 * hurt as f64 / n as f64;
    // derived with this exact grouping so helped + hurt + unchanged sums
    // to 100.0 bitwise (the subtraction is exact for helped + hurt >= 50,
    // and the reassembled tie rounds to even = 100 below that)
    let pct_unchanged = 100.0 - (pct_helped + pct_hurt);
    Ok(Summary {
        n_clients: n,
        metric_kind: kind,
        mean_before,
        mean_after,
        std_before,
        std_after,
        pct_helped,
        pct_hurt,
        pct_unchanged,
    })
}

/// Mean and population spread of one headline number across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiRunSummary {
    pub n_runs: usize,
    pub mean_before: Aggregate,
    pub mean_after: Aggregate,
    pub pct_helped: Aggregate,
    pub pct_hurt: Aggregate,
}

/// Cross-seed aggregation; meaningless for a single run, so fewer than two
/// summaries is an error rather than a silent zero-spread answer.
pub fn multi_run_summary(runs: &[Summary]) -> Result<MultiRunSummary> {
    if runs.len() < 2 {
        return Err(Error::data("cross-run summary needs at least two runs"));
    }
    let agg = |f: fn(&Summary) -> f64| -> Aggregate {
        let values: Vec<f64> = runs.iter().map(f).collect();
        let (mean, std) = mean_and_std(&values);
        Aggregate { mean, std }
    };
    Ok(MultiRunSummary {
        n_runs: runs.len(),
        mean_before: agg(|s| s.mean_before),
        mean_after: agg(|s| s.mean_after),
        pct_helped: agg(|s| s.pct_helped),
        pct_hurt: agg(|s| s.pct_hurt),
    })
}

/// One configuration's position on the in-distribution versus
/// out-of-distribution tradeoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdOodPoint {
    pub label: String,
    /// Mean metric of each personalized model on its own client's held-out
    /// examples.
    pub id_metric: f64,
    /// Mean metric of the same models on the pooled foreign examples.
    pub ood_metric: f64,
}

/// Evaluates a family of personalization configurations on both axes. The
/// personalizer maps (client, configuration index) to the model that client
/// would deploy under that configuration.
pub fn id_ood_curve<F>(
    ds: &FederatedDataset,
    ood: &[Example],
    labels: &[String],
    personalize: F,
) -> Result<Vec<IdOodPoint>>
where
    F: Fn(&ClientDataset, usize) -> Result<ModelParams> + Sync,
{
    if ood.is_empty() {
        return Err(Error::data("empty out-of-distribution pool"));
    }
    let ood_refs: Vec<&Example> = ood.iter().collect();
    let clients: Vec<&ClientDataset> = crate::personalize::reporting_clients(ds)
        .into_iter()
        .filter(|c| !ds.personalization_set(c).is_empty() && !ds.evaluation_set(c).is_empty())
        .collect();
    if clients.is_empty() {
        return Err(Error::data("no clients to personalize"));
    }
    let mut points = Vec::with_capacity(labels.len());
    for (idx, label) in labels.iter().enumerate() {
        let mut id_sum = 0.0;
        let mut ood_sum = 0.0;
        for c in &clients {
            let model = personalize(c, idx)?;
            id_sum += models::evaluate_metric(&model, &ds.evaluation_set(c))?;
            ood_sum += models::evaluate_metric(&model, &ood_refs)?;
        }
        points.push(IdOodPoint {
            label: label.clone(),
            id_metric: id_sum / clients.len() as f64,
            ood_metric: ood_sum / clients.len() as f64,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunicationReport {
    pub rounds: Vec<usize>,
    pub cumulative_broadcast: Vec<u64>,
    pub cumulative_uploaded: Vec<u64>,
    pub cumulative_total: Vec<u64>,
}

pub fn communication_report(traces: &[RoundTrace]) -> CommunicationReport {
    let mut rounds = Vec::with_capacity(traces.len());
    let mut broadcast = Vec::with_capacity(traces.len());
    let mut uploaded = Vec::with_capacity(traces.len());
    let mut total = Vec::with_capacity(traces.len());
    let mut b = 0u64;
    let mut u = 0u64;
    for t in traces {
        b += t.params_broadcast;
        u += t.params_uploaded;
        rounds.push(t.round);
        broadcast.push(b);
        uploaded.push(u);
        total.push(b + u);
    }
    CommunicationReport {
        rounds,
        cumulative_broadcast: broadcast,
        cumulative_uploaded: uploaded,
        cumulative_total: total,
    }
}

/// Returns a copy of the dataset where every client's personalization-side
/// examples are subsampled to `floor(fraction * m)`, plus the number of
/// clients whose set became empty. Fractions at or above 1 return the
/// dataset unchanged. Dropped examples are removed outright, so held-out
/// evaluation examples are never touched.
pub fn subsample_personalization(
    ds: &FederatedDataset,
    fraction: f64,
    seed: u64,
) -> Result<(FederatedDataset, usize)> {
    if !(fraction >= 0.0) || !fraction.is_finite() {
        return Err(Error::config("fraction must be non-negative and finite"));
    }
    if fraction >= 1.0 {
        return Ok((ds.clone(), 0));
    }
    let pers_tag = match ds.regime() {
        crate::datamodel::Regime::CrossDevice => Split::Personalization,
        crate::datamodel::Regime::CrossSilo => Split::Train,
    };
    let mut out = ds.clone();
    let mut emptied = 0usize;
    for client in &mut out.clients {
        let tags = match &client.split_tags {
            Some(t) => t.clone(),
            None => continue,
        };
        let pers_idx: Vec<usize> =
            (0..tags.len()).filter(|&i| tags[i] == pers_tag).collect();
        if pers_idx.is_empty() {
            continue;
        }
        let keep_n = (fraction * pers_idx.len() as f64 + 1e-9).floor() as usize;
        if keep_n == pers_idx.len() {
            continue;
        }
        if keep_n == 0 {
            emptied += 1;
        }
        let mut rng = StreamKey::new(seed)
            .label("sweep")
            .index(fraction.to_bits())
            .label(client.client_id.as_str())
            .rng();
        let mut order = pers_idx.clone();
        for i in 0..order.len() {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut drop: Vec<usize> = order[keep_n..].to_vec();
        drop.sort_unstable();
        let mut examples = Vec::with_capacity(client.examples.len() - drop.len());
        let mut new_tags = Vec::with_capacity(tags.len() - drop.len());
        let mut drop_iter = drop.iter().peekable();
        for (i, (ex, tag)) in client.examples.iter().zip(&tags).enumerate() {
            if drop_iter.peek() == Some(&&i) {
                drop_iter.next();
                continue;
            }
            examples.push(ex.clone());
            new_tags.push(*tag);
        }
        client.examples = examples;
        client.split_tags = Some(new_tags);
    }
    Ok((out, emptied))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub summary: Summary,
    /// Clients whose personalization set the subsampling emptied.
    pub skipped: usize,
}

/// Runs an evaluation at several personalization budgets. The evaluator
/// sees a dataset whose personalization sets are already thinned.
pub fn personalization_set_sweep<F>(
    ds: &FederatedDataset,
    fractions: &[f64],
    seed: u64,
    evaluate: F,
) -> Result<Vec<SweepPoint>>
where
    F: Fn(&FederatedDataset) -> Result<PerClientMetrics>,
{
    if fractions.is_empty() {
        return Err(Error::config("sweep needs at least one fraction"));
    }
    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let (thinned, skipped) = subsample_personalization(ds, fraction, seed)?;
        let metrics = evaluate(&thinned)?;
        points.push(SweepPoint { fraction, summary: summarize(&metrics)?, skipped });
    }
    Ok(points)
}
