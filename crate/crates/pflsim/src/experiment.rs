//! Runs a configured experiment end to end: one run per seed, each producing
//! report.json, metrics.csv and per_client.json under its own directory,
//! plus a cross-seed summary.json when there are at least two runs. Every
//! artifact is a pure function of (config, seed), which is what makes the
//! verification rerun meaningful.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{
    run_seeds, Algorithm, ExperimentConfig, CsvSection, DatasetSection, csv_schema, split_spec,
    synth_spec, arch_from_model,
};
use crate::data::{self, SplitRegime};
use crate::datamodel::{FederatedDataset, MetricKind, PerClientMetrics, Role, RoundTrace};
use crate::engine::{self, EngineConfig, EvalPoint, RunOptions};
use crate::error::{Error, Result};
use crate::eval::{multi_run_summary, summarize, MultiRunSummary, Summary};
use crate::models;
use crate::personalize::finetune::{
    finetune_evaluate, local_training_evaluate, FinetuneConfig,
};
use crate::personalize::hypcluster::{
    ensemble_k_fedavg, hypcluster_evaluate, run_hypcluster, HypClusterConfig,
};
use crate::personalize::knn::{knn_evaluate, KnnConfig};
use crate::personalize::mtl::{
    ditto_evaluate, mocha_evaluate, run_ditto, run_mocha, DittoConfig, MochaConfig,
};
use crate::tuning::{tune_finetune_per_client, ClientChoice, PerClientGrid};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Added to every configured seed, giving fresh runs without editing
    /// the config file.
    pub seed_offset: u64,
    /// Size of the worker pool; `None` uses every core.
    pub workers: Option<usize>,
    /// Re-execute each run after writing it and fail unless the artifacts
    /// match byte for byte.
    pub check: bool,
}

/// Headline record of one run, written as report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub algorithm: String,
    pub metric_kind: MetricKind,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse_round: Option<usize>,
    pub total_params_broadcast: u64,
    pub total_params_uploaded: u64,
    /// Global-model metric trajectory, present when the engine evaluated
    /// during training.
    pub history: Vec<EvalPoint>,
    /// Per-client (lr, epochs) picks when the run tuned per client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<ClientChoice>>,
}

/// Everything one run produces, before any of it touches disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub per_client: PerClientMetrics,
}

fn load_dataset(cfg: &ExperimentConfig, data_seed: u64, split_seed: u64) -> Result<FederatedDataset> {
    let base = match &cfg.dataset {
        DatasetSection::Synthetic(s) => data::generate_synthetic(&synth_spec(s, data_seed))?.dataset,
        DatasetSection::Csv(c) => load_csv(c)?,
    };
    let spec = split_spec(&cfg.split, split_seed);
    match cfg.split.regime {
        SplitRegime::CrossDevice => data::split_cross_device(&base, &spec),
        SplitRegime::CrossSilo => data::split_cross_silo(&base, &spec),
    }
}

fn load_csv(c: &CsvSection) -> Result<FederatedDataset> {
    data::load_csv_silo(&c.path, &csv_schema(c))
}

fn engine_config(cfg: &ExperimentConfig, ds: &FederatedDataset, train_seed: u64) -> EngineConfig {
    let e = &cfg.engine;
    EngineConfig {
        total_rounds: e.total_rounds,
        clients_per_round: e.clients_per_round.unwrap_or_else(|| engine::training_pool(ds).len()),
        client_lr: e.client_lr,
        train_batch_size: e.train_batch_size,
        train_epochs: e.train_epochs,
        server_opt: e.server_opt,
        weighting: engine::Weighting::ByExampleCount,
        rounds_per_evaluation: e.rounds_per_evaluation,
        rounds_per_checkpoint: e.rounds_per_checkpoint,
        eval_clients_per_round: e.eval_clients_per_round,
        seed: train_seed,
    }
}

fn finetune_config(cfg: &ExperimentConfig) -> Result<FinetuneConfig> {
    let ft = cfg
        .finetune
        .as_ref()
        .ok_or_else(|| Error::config("this algorithm needs a [finetune] section"))?;
    Ok(FinetuneConfig {
        lr: ft.lr,
        max_epochs: ft.max_epochs,
        scope: ft.scope,
        batch_size: ft.batch_size,
    })
}

fn tuning_grid(cfg: &ExperimentConfig) -> Option<PerClientGrid> {
    cfg.tuning.as_ref().map(|t| PerClientGrid {
        lrs: t.lrs.clone(),
        epochs: t.epochs.clone(),
        scope: t.scope,
        batch_size: t.batch_size,
    })
}

fn trace_totals(traces: &[RoundTrace]) -> (u64, u64) {
    let b = traces.iter().map(|t| t.params_broadcast).sum();
    let u = traces.iter().map(|t| t.params_uploaded).sum();
    (b, u)
}

/// Executes one run and returns its artifacts. Identical (config, seed)
/// pairs produce identical artifacts. Touches disk only to write engine
/// checkpoints, and only when the config asks for them.
pub fn execute_run(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    crate::config::validate_config(cfg)?;
    let stages = run_seeds(seed);
    let ds = load_dataset(cfg, stages.data, stages.split)?;
    let arch = arch_from_model(&cfg.model, ds.feature_dim, ds.num_classes)?;
    let engine_cfg = engine_config(cfg, &ds, stages.train);

    let mut best_epoch = None;
    let mut collapse_round = None;
    let mut choices = None;
    let mut history: Vec<EvalPoint> = Vec::new();
    let mut totals = (0u64, 0u64);

    let per_client = match cfg.algorithm {
        Algorithm::Local => {
            if let Some(grid) = tuning_grid(cfg) {
                let init = models::init_params(&arch, stages.train)?;
                let out = tune_finetune_per_client(&ds, &init, &grid, stages.train)?;
                choices = Some(out.choices);
                out.per_client
            } else {
                let out = local_training_evaluate(&ds, &arch, &finetune_config(cfg)?, stages.train)?;
                best_epoch = Some(out.best_epoch);
                out.per_client
            }
        }
        Algorithm::FedavgFinetune => {
            let run = run_with_checkpoints(&ds, &arch, &engine_cfg, cfg, seed)?;
            history = run.history;
            totals = trace_totals(&run.traces);
            if let Some(grid) = tuning_grid(cfg) {
                let out = tune_finetune_per_client(&ds, &run.params, &grid, stages.train)?;
                choices = Some(out.choices);
                out.per_client
            } else {
                let out = finetune_evaluate(&ds, &run.params, &finetune_config(cfg)?, stages.train)?;
                best_epoch = Some(out.best_epoch);
                out.per_client
            }
        }
        Algorithm::Hypcluster => {
            let hc = cfg.hypcluster.as_ref().unwrap();
            let hc_cfg = HypClusterConfig {
                k: hc.k,
                warmstart_fraction: hc.warmstart_fraction,
                engine: engine_cfg,
            };
            let run = run_hypcluster(&ds, &arch, &hc_cfg)?;
            history = run.history;
            totals = trace_totals(&run.traces);
            collapse_round = run.collapse_round;
            hypcluster_evaluate(&ds, &run.models)?.0
        }
        Algorithm::EnsembleFedavg => {
            let k = cfg.ensemble.as_ref().unwrap().k;
            let runs = ensemble_k_fedavg(&ds, &arch, &engine_cfg, k)?;
            let per_run: Vec<&[RoundTrace]> = runs.iter().map(|r| r.traces.as_slice()).collect();
            totals = trace_totals(&engine::merge_traces(&per_run)?);
            let models_k: Vec<_> = runs.into_iter().map(|r| r.params).collect();
            hypcluster_evaluate(&ds, &models_k)?.0
        }
        Algorithm::KnnPer => {
            let knn = cfg.knn.as_ref().unwrap();
            let run = run_with_checkpoints(&ds, &arch, &engine_cfg, cfg, seed)?;
            history = run.history;
            totals = trace_totals(&run.traces);
            knn_evaluate(&ds, &run.params, &KnnConfig { k: knn.k, coef: knn.coef })?
        }
        Algorithm::Ditto => {
            let dt = cfg.ditto.as_ref().unwrap();
            let dt_cfg = DittoConfig {
                lambda: dt.lambda,
                personal_lr: dt.personal_lr,
                personal_epochs: dt.personal_epochs,
                engine: engine_cfg,
            };
            let run = run_ditto(&ds, &arch, &dt_cfg)?;
            history = run.global.history.clone();
            totals = trace_totals(&run.global.traces);
            ditto_evaluate(&ds, &run)?
        }
        Algorithm::Mocha => {
            let mc = cfg.mocha.as_ref().unwrap();
            let outer_iters = mc.outer_iters;
            let mc_cfg = MochaConfig {
                lambda: mc.lambda,
                outer_iters,
                inner_epochs: mc
                    .inner_epochs
                    .unwrap_or_else(|| (engine_cfg.total_rounds * engine_cfg.train_epochs / outer_iters).max(1)),
                client_lr: mc.client_lr.unwrap_or(engine_cfg.client_lr),
                batch_size: mc.batch_size.unwrap_or(engine_cfg.train_batch_size),
                seed: stages.train,
            };
            let run = run_mocha(&ds, &arch, &mc_cfg)?;
            // every outer iteration ships each client model up and its
            // coupling vector back down
            let k = run.models.len() as u64;
            let p = arch.param_count() as u64;
            totals = (outer_iters as u64 * k * p, outer_iters as u64 * k * p);
            mocha_evaluate(&ds, &run, stages.train)?
        }
    };

    let summary = summarize(&per_client)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: format!("run_{seed}"),
        seed,
        algorithm: cfg.algorithm.as_str().to_string(),
        metric_kind: per_client.metric_kind,
        summary,
        best_epoch,
        collapse_round,
        total_params_broadcast: totals.0,
        total_params_uploaded: totals.1,
        history,
        choices,
    };
    Ok(RunArtifacts { report, per_client })
}

/// Newest checkpoint under `dir` that a run of `total_rounds` can still use.
fn latest_checkpoint(dir: &Path, total_rounds: usize) -> Result<Option<engine::Checkpoint>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let round = match name
            .strip_prefix("checkpoint_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|digits| digits.parse::<usize>().ok())
        {
            Some(r) => r,
            None => continue,
        };
        if round <= total_rounds && best.as_ref().map_or(true, |(r, _)| round > *r) {
            best = Some((round, entry.path()));
        }
    }
    match best {
        Some((_, path)) => Ok(Some(engine::load_checkpoint(&path)?)),
        None => Ok(None),
    }
}

/// Plain single-model runs honor rounds_per_checkpoint; checkpoints land in
/// the run's own directory, so a rerun with the same seed overwrites rather
/// than accumulates. A run killed partway leaves checkpoints behind, and
/// picking up from the newest one yields the same artifacts as starting
/// over, provided the config is unchanged. Early evaluation points cannot
/// be replayed, so runs that evaluate during training always start fresh.
fn run_with_checkpoints(
    ds: &FederatedDataset,
    arch: &crate::models::ArchDescriptor,
    engine_cfg: &EngineConfig,
    cfg: &ExperimentConfig,
    run_seed: u64,
) -> Result<engine::FedAvgRun> {
    if engine_cfg.rounds_per_checkpoint == 0 {
        return engine::run_fedavg(ds, arch, engine_cfg);
    }
    let dir = cfg.output_dir.join(format!("run_{run_seed}")).join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    let resume = if engine_cfg.rounds_per_evaluation == 0 {
        latest_checkpoint(&dir, engine_cfg.total_rounds)?
            .filter(|ck| ck.seed == engine_cfg.seed && ck.params.arch == *arch)
    } else {
        None
    };
    let covered = resume.as_ref().map_or(0, |ck| ck.round);
    let opts = RunOptions { checkpoint_dir: Some(dir), resume_from: resume };
    let mut run = engine::run_fedavg_opts(ds, arch, engine_cfg, &opts)?;
    if covered > 0 {
        // the rounds the checkpoint already covered are deterministic in
        // (seed, round); rebuild their traces so the report matches an
        // uninterrupted run byte for byte
        let pool = engine::training_pool(ds);
        let model_size = arch.param_count() as u64;
        let mut front = Vec::with_capacity(covered + run.traces.len());
        for round in 1..=covered {
            let mut ids = data::sample_clients(&pool, engine_cfg.clients_per_round, round, engine_cfg.seed)?;
            ids.sort();
            front.push(RoundTrace {
                round,
                sampled_client_ids: ids,
                params_broadcast: engine_cfg.clients_per_round as u64 * model_size,
                params_uploaded: engine_cfg.clients_per_round as u64 * model_size,
                cluster_assignments: None,
            });
        }
        front.append(&mut run.traces);
        run.traces = front;
    }
    Ok(run)
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Long-format table of everything numeric in a report. Floats print via
/// their shortest round-trip representation, so equal runs give equal bytes.
pub fn render_metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("run_id,seed,algorithm,metric,value,round\n");
    let prefix = format!(
        "{},{},{}",
        csv_field(&report.run_id),
        report.seed,
        csv_field(&report.algorithm)
    );
    let mut scalar = |name: &str, value: String| {
        out.push_str(&format!("{prefix},{name},{value},\n"));
    };
    let s = &report.summary;
    scalar("n_clients", s.n_clients.to_string());
    scalar("mean_before", format!("{:?}", s.mean_before));
    scalar("mean_after", format!("{:?}", s.mean_after));
    scalar("std_before", format!("{:?}", s.std_before));
    scalar("std_after", format!("{:?}", s.std_after));
    scalar("pct_helped", format!("{:?}", s.pct_helped));
    scalar("pct_hurt", format!("{:?}", s.pct_hurt));
    scalar("pct_unchanged", format!("{:?}", s.pct_unchanged));
    scalar("total_params_broadcast", report.total_params_broadcast.to_string());
    scalar("total_params_uploaded", report.total_params_uploaded.to_string());
    if let Some(e) = report.best_epoch {
        scalar("best_epoch", e.to_string());
    }
    if let Some(r) = report.collapse_round {
        scalar("collapse_round", r.to_string());
    }
    for point in &report.history {
        let name = match point.population {
            Role::Train => "eval_train",
            Role::Valid => "eval_valid",
            Role::Test => "eval_test",
        };
        out.push_str(&format!("{prefix},{name},{:?},{}\n", point.metric, point.round));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct RenderedRun {
    seed: u64,
    report_json: Vec<u8>,
    per_client_json: Vec<u8>,
    metrics_csv: Vec<u8>,
    summary: Summary,
}

fn render_run(cfg: &ExperimentConfig, seed: u64) -> Result<RenderedRun> {
    let artifacts = execute_run(cfg, seed)?;
    let report_json = serde_json::to_vec_pretty(&artifacts.report)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let per_client_json = serde_json::to_vec_pretty(&artifacts.per_client)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let metrics_csv = render_metrics_csv(&artifacts.report).into_bytes();
    Ok(RenderedRun {
        seed,
        report_json,
        per_client_json,
        metrics_csv,
        summary: artifacts.report.summary,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub run_dirs: Vec<PathBuf>,
    pub summaries: Vec<Summary>,
    /// Present when at least two seeds produced a cross-run summary.
    pub summary_path: Option<PathBuf>,
}

/// Runs every configured seed (shifted by the offset), writes the per-run
/// artifacts and the cross-run summary, and optionally verifies each run by
/// re-executing it and comparing bytes.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &ExperimentOptions) -> Result<ExperimentOutcome> {
    crate::config::validate_config(cfg)?;
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| s.wrapping_add(opts.seed_offset)).collect();

    let execute_all = || -> Result<Vec<RenderedRun>> {
        seeds.iter().map(|&seed| render_run(cfg, seed)).collect()
    };
    let runs = match opts.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("worker pool: {e}")))?;
            pool.install(execute_all)?
        }
        None => execute_all()?,
    };

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut run_dirs = Vec::with_capacity(runs.len());
    for run in &runs {
        let dir = cfg.output_dir.join(format!("run_{}", run.seed));
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("report.json"), &run.report_json)?;
        write_atomic(&dir.join("metrics.csv"), &run.metrics_csv)?;
        write_atomic(&dir.join("per_client.json"), &run.per_client_json)?;
        run_dirs.push(dir);
    }

    let summaries: Vec<Summary> = runs.iter().map(|r| r.summary).collect();
    let mut summary_path = None;
    if summaries.len() >= 2 {
        let agg = multi_run_summary(&summaries)?;
        let path = cfg.output_dir.join("summary.json");
        let bytes =
            serde_json::to_vec_pretty(&agg).map_err(|e| Error::Serialization(e.to_string()))?;
        write_atomic(&path, &bytes)?;
        summary_path = Some(path);
    }

    if opts.check {
        check_experiment(cfg, opts)?;
    }

    Ok(ExperimentOutcome { run_dirs, summaries, summary_path })
}

/// Re-executes every run and compares the fresh artifacts byte for byte
/// against what the output directory holds. Any difference, whether from
/// nondeterminism or from someone editing the files, is an error.
pub fn check_experiment(cfg: &ExperimentConfig, opts: &ExperimentOptions) -> Result<()> {
    for &base in &cfg.seeds {
        let seed = base.wrapping_add(opts.seed_offset);
        let fresh = render_run(cfg, seed)?;
        let dir = cfg.output_dir.join(format!("run_{seed}"));
        for (name, bytes) in [
            ("report.json", &fresh.report_json),
            ("metrics.csv", &fresh.metrics_csv),
            ("per_client.json", &fresh.per_client_json),
        ] {
            let on_disk = std::fs::read(dir.join(name))?;
            if &on_disk != bytes {
                return Err(Error::Determinism(format!(
                    "{name} of seed {seed} does not match a fresh rerun"
                )));
            }
        }
    }
    Ok(())
}

/// One row of a directory summary: the headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunLine {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: String,
    pub metric_kind: MetricKind,
    pub mean_before: f64,
    pub mean_after: f64,
    pub pct_hurt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirSummary {
    pub runs: Vec<RunLine>,
    pub aggregate: Option<MultiRunSummary>,
}

/// Reads every run_*/report.json under `dir` in lexical order. A report
/// written by a different schema version is a hard error, not a skip.
pub fn summarize_dir(dir: &Path) -> Result<DirSummary> {
    let mut report_paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && name.starts_with("run_") {
            let report = entry.path().join("report.json");
            if report.is_file() {
                report_paths.push(report);
            }
        }
    }
    report_paths.sort();
    if report_paths.is_empty() {
        return Err(Error::data(format!("no run reports under {}", dir.display())));
    }

    let mut runs = Vec::with_capacity(report_paths.len());
    let mut summaries = Vec::with_capacity(report_paths.len());
    for path in &report_paths {
        let bytes = std::fs::read(path)?;
        let report: RunReport = serde_json::from_slice(&bytes)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: report.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        summaries.push(report.summary);
        runs.push(RunLine {
            run_id: report.run_id,
            seed: report.seed,
            algorithm: report.algorithm,
            metric_kind: report.metric_kind,
            mean_before: report.summary.mean_before,
            mean_after: report.summary.mean_after,
            pct_hurt: report.summary.pct_hurt,
        });
    }
    let aggregate = if summaries.len() >= 2 { Some(multi_run_summary(&summaries)?) } else { None };
    Ok(DirSummary { runs, aggregate })
}

/// Plain-text rendering for terminals; one line per run plus the aggregate.
pub fn format_dir_summary(s: &DirSummary) -> String {
    let mut out = String::new();
    for r in &s.runs {
        out.push_str(&format!(
            "{:<12} seed={:<6} {:<16} {:?} before={:.6} after={:.6} hurt={:.1}%\n",
            r.run_id, r.seed, r.algorithm, r.metric_kind, r.mean_before, r.mean_after, r.pct_hurt
        ));
    }
    if let Some(a) = &s.aggregate {
        out.push_str(&format!(
            "aggregate ({} runs): before={:.6}±{:.6} after={:.6}±{:.6} hurt={:.1}±{:.1}%\n",
            a.n_runs,
            a.mean_before.mean,
            a.mean_before.std,
            a.mean_after.mean,
            a.mean_after.std,
            a.pct_hurt.mean,
            a.pct_hurt.std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        EngineSection, FinetuneSection, ModelSection, SplitSection, SyntheticSection,
    };
    use crate::data::SynthKind;
    use crate::models::ModelFamily;
    use crate::optim::ServerOptSpec;
    use crate::personalize::finetune::FinetuneScope;

    fn small_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: 1,
            output_dir: dir.to_path_buf(),
            seeds: vec![11, 12],
            algorithm: Algorithm::FedavgFinetune,
            dataset: DatasetSection::Synthetic(SyntheticSection {
                kind: SynthKind::PlantedClusters,
                num_clients: 24,
                examples_per_client: (24, 6),
                feature_dim: 5,
                num_classes: 3,
                num_planted_clusters: 2,
                heterogeneity: 4.0,
            }),
            split: SplitSection {
                regime: SplitRegime::CrossDevice,
                fractions: (0.6, 0.2, 0.2),
                personalization_fraction: 0.5,
                sort_by_time: false,
            },
            model: ModelSection { family: ModelFamily::SoftmaxClassifier, hidden_dim: None, l2_reg: 0.0 },
            engine: EngineSection {
                total_rounds: 6,
                clients_per_round: Some(5),
                client_lr: 0.1,
                train_batch_size: 16,
                train_epochs: 1,
                rounds_per_evaluation: 3,
                rounds_per_checkpoint: 0,
                eval_clients_per_round: None,
                server_opt: ServerOptSpec::avg(1.0),
            },
            finetune: Some(FinetuneSection {
                lr: 0.05,
                max_epochs: 3,
                scope: FinetuneScope::AllLayers,
                batch_size: None,
            }),
            hypcluster: None,
            ensemble: None,
            knn: None,
            ditto: None,
            mocha: None,
            tuning: None,
        }
    }

    #[test]
    fn a_run_produces_all_artifacts_and_a_cross_seed_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let out = run_experiment(&cfg, &ExperimentOptions::default()).unwrap();
        assert_eq!(out.run_dirs.len(), 2);
        for d in &out.run_dirs {
            assert!(d.join("report.json").is_file());
            assert!(d.join("metrics.csv").is_file());
            assert!(d.join("per_client.json").is_file());
        }
        assert!(out.summary_path.as_ref().unwrap().is_file());

        let ds = summarize_dir(dir.path()).unwrap();
        assert_eq!(ds.runs.len(), 2);
        assert!(ds.aggregate.is_some());
        let text = format_dir_summary(&ds);
        assert!(text.contains("run_11"), "{text}");
        assert!(text.contains("aggregate (2 runs)"), "{text}");
    }

    #[test]
    fn rerunning_a_seed_yields_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let a = render_run(&cfg, 7).unwrap();
        let b = render_run(&cfg, 7).unwrap();
        assert_eq!(a.report_json, b.report_json);
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(a.per_client_json, b.per_client_json);
    }

    #[test]
    fn worker_count_does_not_change_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.seeds = vec![3];

        let one = tempfile::tempdir().unwrap();
        cfg.output_dir = one.path().to_path_buf();
        run_experiment(&cfg, &ExperimentOptions { workers: Some(1), ..Default::default() }).unwrap();

        let four = tempfile::tempdir().unwrap();
        cfg.output_dir = four.path().to_path_buf();
        run_experiment(&cfg, &ExperimentOptions { workers: Some(4), ..Default::default() }).unwrap();

        for name in ["report.json", "metrics.csv", "per_client.json"] {
            let a = std::fs::read(one.path().join("run_3").join(name)).unwrap();
            let b = std::fs::read(four.path().join("run_3").join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between worker counts");
        }
    }

    #[test]
    fn check_mode_passes_on_a_deterministic_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.seeds = vec![5];
        run_experiment(&cfg, &ExperimentOptions { check: true, ..Default::default() }).unwrap();
    }

    #[test]
    fn check_mode_flags_tampered_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.seeds = vec![5];
        let out = run_experiment(&cfg, &ExperimentOptions::default()).unwrap();
        std::fs::write(out.run_dirs[0].join("metrics.csv"), b"run_id\n").unwrap();
        match check_experiment(&cfg, &ExperimentOptions::default()) {
            Err(Error::Determinism(msg)) => assert!(msg.contains("metrics.csv"), "{msg}"),
            other => panic!("expected determinism error, got {other:?}"),
        }
    }

    #[test]
    fn seed_offset_moves_runs_to_fresh_directories() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.seeds = vec![1];
        let out =
            run_experiment(&cfg, &ExperimentOptions { seed_offset: 100, ..Default::default() })
                .unwrap();
        assert!(out.run_dirs[0].ends_with("run_101"));
    }

    #[test]
    fn report_schema_mismatch_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run_9");
        std::fs::create_dir_all(&run_dir).unwrap();
        let cfg = small_config(dir.path());
        let mut artifacts = execute_run(&cfg, 9).unwrap();
        artifacts.report.schema_version = 99;
        std::fs::write(
            run_dir.join("report.json"),
            serde_json::to_vec_pretty(&artifacts.report).unwrap(),
        )
        .unwrap();
        match summarize_dir(dir.path()) {
            Err(Error::SchemaVersion { found, expected }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, REPORT_SCHEMA_VERSION);
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn every_algorithm_runs_end_to_end_on_synthetic_data() {
        // silo-regime dataset so ditto and mocha are legal
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.seeds = vec![2];
        cfg.split = SplitSection {
            regime: SplitRegime::CrossSilo,
            fractions: (0.6, 0.2, 0.2),
            personalization_fraction: 0.5,
            sort_by_time: false,
        };
        cfg.engine.clients_per_round = Some(8);
        cfg.hypcluster = Some(crate::config::HypclusterSection { k: 2, warmstart_fraction: 0.0 });
        cfg.ensemble = Some(crate::config::EnsembleSection { k: 2 });
        cfg.knn = Some(crate::config::KnnSection { k: 5, coef: 0.5 });
        cfg.ditto = Some(crate::config::DittoSection { lambda: 0.1, personal_lr: 0.05, personal_epochs: 1 });
        cfg.mocha = Some(crate::config::MochaSection {
            lambda: 1e-3,
            outer_iters: 2,
            inner_epochs: None,
            client_lr: None,
            batch_size: None,
        });

        for alg in [
            Algorithm::Local,
            Algorithm::FedavgFinetune,
            Algorithm::Hypcluster,
            Algorithm::EnsembleFedavg,
            Algorithm::KnnPer,
            Algorithm::Ditto,
            Algorithm::Mocha,
        ] {
            let mut c = cfg.clone();
            c.algorithm = alg;
            if alg == Algorithm::Mocha {
                // linear family requirement
                c.model.family = ModelFamily::SoftmaxClassifier;
            }
            let artifacts = execute_run(&c, 2)
                .unwrap_or_else(|e| panic!("{} failed: {e}", alg.as_str()));
            assert_eq!(artifacts.report.algorithm, alg.as_str());
            assert!(artifacts.report.summary.n_clients > 0, "{}", alg.as_str());
            if alg == Algorithm::EnsembleFedavg {
                assert!(artifacts.report.total_params_broadcast > 0);
            }
        }
    }

    #[test]
    fn metrics_csv_has_one_row_per_scalar_and_history_point() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let artifacts = execute_run(&cfg, 4).unwrap();
        let csv = render_metrics_csv(&artifacts.report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run_id,seed,algorithm,metric,value,round");
        // 10 scalars + best_epoch + history rows
        let expected = 1 + 10 + 1 + artifacts.report.history.len();
        assert_eq!(lines.len(), expected, "{csv}");
        assert!(lines.iter().any(|l| l.contains(",mean_after,")));
        assert!(lines.iter().any(|l| l.contains(",eval_valid,") || l.contains(",eval_test,")));
    }

    fn resumable_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = small_config(dir);
        cfg.seeds = vec![21];
        cfg.engine.rounds_per_checkpoint = 3;
        cfg.engine.rounds_per_evaluation = 0;
        cfg
    }

    fn read_artifacts(dir: &Path) -> Vec<Vec<u8>> {
        ["report.json", "metrics.csv", "per_client.json"]
            .iter()
            .map(|name| std::fs::read(dir.join(name)).unwrap())
            .collect()
    }

    #[test]
    fn an_interrupted_run_resumes_to_identical_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resumable_config(dir.path());
        run_experiment(&cfg, &ExperimentOptions::default()).unwrap();

        let run_dir = dir.path().join("run_21");
        let reference = read_artifacts(&run_dir);
        let late_ck = run_dir.join("checkpoints").join("checkpoint_000006.json");
        assert!(late_ck.is_file());

        // as if the process died after round 3: the round-3 checkpoint is
        // on disk, nothing later exists
        std::fs::remove_file(&late_ck).unwrap();
        for name in ["report.json", "metrics.csv", "per_client.json"] {
            std::fs::remove_file(run_dir.join(name)).unwrap();
        }

        run_experiment(&cfg, &ExperimentOptions::default()).unwrap();
        assert_eq!(read_artifacts(&run_dir), reference);
        assert!(late_ck.is_file());
    }

    #[test]
    fn resume_picks_up_the_stored_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resumable_config(dir.path());
        run_experiment(&cfg, &ExperimentOptions::default()).unwrap();

        let run_dir = dir.path().join("run_21");
        let reference = std::fs::read(run_dir.join("report.json")).unwrap();
        let ck_path = run_dir.join("checkpoints").join("checkpoint_000003.json");
        let mut ck = engine::load_checkpoint(&ck_path).unwrap();
        ck.params.values[0] += 1.0;
        engine::save_checkpoint(&ck, &ck_path).unwrap();
        std::fs::remove_file(run_dir.join("checkpoints").join("checkpoint_000006.json")).unwrap();

        run_experiment(&cfg, &ExperimentOptions::default()).unwrap();
        let resumed = std::fs::read(run_dir.join("report.json")).unwrap();
        assert_ne!(resumed, reference, "the run restarted from scratch instead of the checkpoint");
    }

    #[test]
    fn runs_that_evaluate_during_training_never_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = resumable_config(dir.path());
        cfg.engine.rounds_per_evaluation = 3;
        run_experiment(&cfg, &ExperimentOptions::default()).unwrap();

        let run_dir = dir.path().join("run_21");
        let reference = std::fs::read(run_dir.join("report.json")).unwrap();
        let ck_path = run_dir.join("checkpoints").join("checkpoint_000003.json");
        let mut ck = engine::load_checkpoint(&ck_path).unwrap();
        ck.params.values[0] += 1.0;
        engine::save_checkpoint(&ck, &ck_path).unwrap();

        // a fresh pass ignores the poisoned checkpoint entirely, because the
        // mid-training history cannot be rebuilt from it
        run_experiment(&cfg, &ExperimentOptions::default()).unwrap();
        let rerun = std::fs::read(run_dir.join("report.json")).unwrap();
        assert_eq!(rerun, reference);
    }
}
