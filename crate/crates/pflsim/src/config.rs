//! Experiment configuration: a single TOML file describes the dataset, the
//! split, the model, the training engine and the personalization algorithm.
//! Seeds listed in the file fan out into independent runs; everything else
//! derives deterministically from the file content and the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, SplitRegime, SplitSpec, SynthKind, SynthSpec};
use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::models::{ArchDescriptor, ModelFamily};
use crate::optim::ServerOptSpec;
use crate::personalize::finetune::FinetuneScope;
use crate::rng::StreamKey;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Per-client training from the shared init; no federation at all.
    Local,
    /// Federated averaging followed by per-client fine-tuning.
    FedavgFinetune,
    /// k cluster models with per-round min-loss selection.
    Hypcluster,
    /// k independent federated runs; clients pick one post hoc.
    EnsembleFedavg,
    /// Federated averaging plus nearest-neighbor blending.
    KnnPer,
    /// Personal models regularized toward the concurrent global model.
    Ditto,
    /// Task-relationship multi-task training for linear families.
    Mocha,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Local => "local",
            Algorithm::FedavgFinetune => "fedavg_finetune",
            Algorithm::Hypcluster => "hypcluster",
            Algorithm::EnsembleFedavg => "ensemble_fedavg",
            Algorithm::KnnPer => "knn_per",
            Algorithm::Ditto => "ditto",
            Algorithm::Mocha => "mocha",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSection {
    pub kind: SynthKind,
    pub num_clients: usize,
    /// [mean, spread]: client sizes are uniform in mean +/- spread.
    pub examples_per_client: (usize, usize),
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_one")]
    pub num_planted_clusters: usize,
    pub heterogeneity: f64,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSection {
    /// Resolved against the config file's directory when relative.
    pub path: PathBuf,
    pub client_col: String,
    pub label_col: String,
    #[serde(default)]
    pub feature_cols: Option<Vec<String>>,
    pub task: TaskKind,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub normalize_labels: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSection {
    Synthetic(SyntheticSection),
    Csv(CsvSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    pub regime: SplitRegime,
    /// Cross-device: fractions of clients per population. Cross-silo:
    /// fractions of each client's examples per tag.
    pub fractions: (f64, f64, f64),
    #[serde(default = "default_half")]
    pub personalization_fraction: f64,
    #[serde(default)]
    pub sort_by_time: bool,
}

fn default_half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub family: ModelFamily,
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub l2_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSection {
    pub total_rounds: usize,
    /// Absent means full participation by the training pool.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    pub client_lr: f64,
    #[serde(default = "default_batch")]
    pub train_batch_size: usize,
    #[serde(default = "default_one")]
    pub train_epochs: usize,
    #[serde(default)]
    pub rounds_per_evaluation: usize,
    #[serde(default)]
    pub rounds_per_checkpoint: usize,
    #[serde(default)]
    pub eval_clients_per_round: Option<usize>,
    pub server_opt: ServerOptSpec,
}

fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub lr: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub scope: FinetuneScope,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypclusterSection {
    pub k: usize,
    #[serde(default)]
    pub warmstart_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSection {
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnSection {
    #[serde(default = "default_neighbors")]
    pub k: usize,
    pub coef: f64,
}

fn default_neighbors() -> usize {
    crate::personalize::knn::DEFAULT_NEIGHBORS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DittoSection {
    pub lambda: f64,
    pub personal_lr: f64,
    #[serde(default = "default_one")]
    pub personal_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MochaSection {
    pub lambda: f64,
    #[serde(default = "default_one")]
    pub outer_iters: usize,
    /// Defaults to total_rounds * train_epochs / outer_iters, at least 1.
    #[serde(default)]
    pub inner_epochs: Option<usize>,
    #[serde(default)]
    pub client_lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSection {
    pub lrs: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default)]
    pub scope: FinetuneScope,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Resolved against the config file's directory when relative.
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub algorithm: Algorithm,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub engine: EngineSection,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub hypcluster: Option<HypclusterSection>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSection>,
    #[serde(default)]
    pub knn: Option<KnnSection>,
    #[serde(default)]
    pub ditto: Option<DittoSection>,
    #[serde(default)]
    pub mocha: Option<MochaSection>,
    /// Per-client (lr, epochs) selection instead of the shared protocol;
    /// applies to the fine-tuning algorithms, cross-silo only.
    #[serde(default)]
    pub tuning: Option<TuningSection>,
}

/// Parses a config file and resolves its relative paths against the file's
/// own directory, so a config means the same thing from any working
/// directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: cfg.schema_version,
            expected: CONFIG_SCHEMA_VERSION,
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    if cfg.output_dir.is_relative() {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    if let DatasetSection::Csv(csv) = &mut cfg.dataset {
        if csv.path.is_relative() {
            csv.path = base.join(&csv.path);
        }
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Structural checks that need no data: section presence per algorithm,
/// positive counts and rates, fraction ranges.
pub fn validate_config(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds must list at least one seed"));
    }
    {
        let mut sorted = cfg.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != cfg.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
    }

    match &cfg.dataset {
        DatasetSection::Synthetic(s) => {
            synth_spec(s, 0).validate()?;
            if cfg.model.family.task_kind() != synth_spec(s, 0).task_kind() {
                return Err(Error::config("model family and synthetic task kind disagree"));
            }
        }
        DatasetSection::Csv(c) => {
            if c.task != cfg.model.family.task_kind() {
                return Err(Error::config("model family and csv task kind disagree"));
            }
        }
    }

    let (a, b, c) = cfg.split.fractions;
    for f in [a, b, c] {
        if !(0.0..=1.0).contains(&f) || !f.is_finite() {
            return Err(Error::config("split fractions must lie in [0, 1]"));
        }
    }
    if cfg.split.regime == SplitRegime::CrossDevice
        && !(cfg.split.personalization_fraction > 0.0 && cfg.split.personalization_fraction < 1.0)
    {
        return Err(Error::config("personalization_fraction must lie strictly in (0, 1)"));
    }

    if cfg.model.family.needs_hidden_dim() && cfg.model.hidden_dim.is_none() {
        return Err(Error::config("this model family needs hidden_dim"));
    }
    if cfg.model.l2_reg < 0.0 || !cfg.model.l2_reg.is_finite() {
        return Err(Error::config("l2_reg must be non-negative and finite"));
    }

    if !(cfg.engine.client_lr > 0.0) || !cfg.engine.client_lr.is_finite() {
        return Err(Error::config("client_lr must be positive and finite"));
    }
    if cfg.engine.train_batch_size == 0 || cfg.engine.train_epochs == 0 {
        return Err(Error::config("train_batch_size and train_epochs must be positive"));
    }
    if cfg.engine.clients_per_round == Some(0) {
        return Err(Error::config("clients_per_round must be positive when given"));
    }
    cfg.engine.server_opt.validate()?;

    let need = |present: bool, table: &str| -> Result<()> {
        if present {
            Ok(())
        } else {
            Err(Error::config(format!(
                "algorithm {:?} needs a [{table}] section",
                cfg.algorithm.as_str()
            )))
        }
    };
    match cfg.algorithm {
        Algorithm::Local | Algorithm::FedavgFinetune => {
            if cfg.tuning.is_none() {
                need(cfg.finetune.is_some(), "finetune")?;
            }
        }
        Algorithm::Hypcluster => need(cfg.hypcluster.is_some(), "hypcluster")?,
        Algorithm::EnsembleFedavg => need(cfg.ensemble.is_some(), "ensemble")?,
        Algorithm::KnnPer => need(cfg.knn.is_some(), "knn")?,
        Algorithm::Ditto => need(cfg.ditto.is_some(), "ditto")?,
        Algorithm::Mocha => need(cfg.mocha.is_some(), "mocha")?,
    }

    if let Some(ft) = &cfg.finetune {
        if !(ft.lr > 0.0) || !ft.lr.is_finite() {
            return Err(Error::config("finetune lr must be positive and finite"));
        }
        if ft.batch_size == Some(0) {
            return Err(Error::config("finetune batch_size must be positive"));
        }
    }
    if let Some(hc) = &cfg.hypcluster {
        if hc.k == 0 {
            return Err(Error::config("hypcluster k must be positive"));
        }
        if !(0.0..=1.0).contains(&hc.warmstart_fraction) {
            return Err(Error::config("warmstart_fraction must lie in [0, 1]"));
        }
    }
    if let Some(en) = &cfg.ensemble {
        if en.k == 0 {
            return Err(Error::config("ensemble k must be positive"));
        }
    }
    if let Some(knn) = &cfg.knn {
        crate::personalize::knn::KnnConfig { k: knn.k, coef: knn.coef }.validate()?;
    }
    if let Some(dt) = &cfg.ditto {
        if dt.lambda < 0.0 || !dt.lambda.is_finite() {
            return Err(Error::config("ditto lambda must be non-negative and finite"));
        }
        if !(dt.personal_lr > 0.0) || !dt.personal_lr.is_finite() {
            return Err(Error::config("ditto personal_lr must be positive and finite"));
        }
        if dt.personal_epochs == 0 {
            return Err(Error::config("ditto personal_epochs must be positive"));
        }
        if cfg.split.regime != SplitRegime::CrossSilo {
            return Err(Error::config("ditto needs the cross-silo regime"));
        }
    }
    if let Some(mc) = &cfg.mocha {
        if mc.lambda < 0.0 || !mc.lambda.is_finite() {
            return Err(Error::config("mocha lambda must be non-negative and finite"));
        }
        if mc.outer_iters == 0 {
            return Err(Error::config("mocha outer_iters must be positive"));
        }
        if mc.inner_epochs == Some(0) || mc.batch_size == Some(0) {
            return Err(Error::config("mocha inner_epochs and batch_size must be positive"));
        }
        if cfg.algorithm == Algorithm::Mocha {
            if !cfg.model.family.is_linear() {
                return Err(Error::config("mocha supports linear model families only"));
            }
            if cfg.split.regime != SplitRegime::CrossSilo {
                return Err(Error::config("mocha needs the cross-silo regime"));
            }
        }
    }
    if let Some(t) = &cfg.tuning {
        if !matches!(cfg.algorithm, Algorithm::Local | Algorithm::FedavgFinetune) {
            return Err(Error::config("[tuning] applies to the fine-tuning algorithms only"));
        }
        if cfg.split.regime != SplitRegime::CrossSilo {
            return Err(Error::config("per-client tuning needs the cross-silo regime"));
        }
        crate::tuning::PerClientGrid {
            lrs: t.lrs.clone(),
            epochs: t.epochs.clone(),
            scope: t.scope,
            batch_size: t.batch_size,
        }
        .validate()?;
    }

    Ok(())
}

/// Seeds for the stages of one run, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub split: u64,
    pub train: u64,
}

pub fn run_seeds(run_seed: u64) -> RunSeeds {
    RunSeeds {
        data: StreamKey::new(run_seed).label("data").seed(),
        split: StreamKey::new(run_seed).label("split").seed(),
        train: StreamKey::new(run_seed).label("train").seed(),
    }
}

pub(crate) fn synth_spec(s: &SyntheticSection, seed: u64) -> SynthSpec {
    SynthSpec {
        kind: s.kind,
        num_clients: s.num_clients,
        examples_per_client: s.examples_per_client,
        feature_dim: s.feature_dim,
        num_classes: s.num_classes,
        num_planted_clusters: s.num_planted_clusters,
        heterogeneity: s.heterogeneity,
        seed,
    }
}

pub(crate) fn csv_schema(c: &CsvSection) -> CsvSchema {
    CsvSchema {
        client_col: c.client_col.clone(),
        label_col: c.label_col.clone(),
        feature_cols: c.feature_cols.clone(),
        task_kind: c.task,
        standardize: c.standardize,
        normalize_labels: c.normalize_labels,
    }
}

pub(crate) fn split_spec(s: &SplitSection, seed: u64) -> SplitSpec {
    let mut spec = match s.regime {
        SplitRegime::CrossDevice => SplitSpec::cross_device(s.fractions, seed),
        SplitRegime::CrossSilo => SplitSpec::cross_silo(s.fractions, seed),
    };
    spec.personalization_fraction = s.personalization_fraction;
    spec.sort_by_time = s.sort_by_time;
    spec
}

pub(crate) fn arch_from_model(
    model: &ModelSection,
    input_dim: usize,
    num_classes: usize,
) -> Result<ArchDescriptor> {
    let arch = match model.family {
        ModelFamily::LinearRegression => ArchDescriptor::linear_regression(input_dim, model.l2_reg),
        ModelFamily::LinearSvm => {
            if num_classes != 2 {
                return Err(Error::config(format!(
                    "linear_svm needs exactly 2 classes, dataset has {num_classes}"
                )));
            }
            ArchDescriptor::linear_svm(input_dim, model.l2_reg)
        }
        ModelFamily::SoftmaxClassifier => {
            ArchDescriptor::softmax(input_dim, num_classes, model.l2_reg)
        }
        ModelFamily::MlpClassifier => ArchDescriptor::mlp_classifier(
            input_dim,
            model.hidden_dim.unwrap_or(0),
            num_classes,
            model.l2_reg,
        ),
        ModelFamily::MlpRegressor => {
            ArchDescriptor::mlp_regressor(input_dim, model.hidden_dim.unwrap_or(0), model.l2_reg)
        }
    };
    arch.validate()?;
    Ok(arch)
}
