//! Model families with closed-form predictions, losses and gradients.
//!
//! Five families cover the benchmark tasks: linear regression (squared
//! error), a binary linear SVM (hinge), a softmax classifier (cross-entropy)
//! and one-hidden-layer MLPs for classification and regression. Parameters
//! live in a single flat `Vec<f64>` described by an [`ArchDescriptor`], so
//! the training engine can treat every family uniformly.
//!
//! Loss convention: mean per-example loss plus `(l2_reg / 2) * ||weights||^2`
//! where bias coordinates are excluded from the penalty. Gradients are
//! analytic; a finite-difference oracle in the test suite checks them.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Example, Label, MetricKind, TaskKind};
use crate::error::{Error, Result};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    LinearRegression,
    LinearSvm,
    SoftmaxClassifier,
    MlpClassifier,
    MlpRegressor,
}

impl ModelFamily {
    pub fn task_kind(self) -> TaskKind {
        match self {
            ModelFamily::LinearRegression | ModelFamily::MlpRegressor => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(
            self,
            ModelFamily::LinearRegression | ModelFamily::LinearSvm | ModelFamily::SoftmaxClassifier
        )
    }

    pub fn needs_hidden_dim(self) -> bool {
        !self.is_linear()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub family: ModelFamily,
    pub input_dim: usize,
    /// Number of classes; 1 for regression families.
    pub num_classes: usize,
    /// Hidden width for MLP families; ignored (0) for linear families.
    pub hidden_dim: usize,
    pub l2_reg: f64,
}

impl ArchDescriptor {
    pub fn linear_regression(input_dim: usize, l2_reg: f64) -> Self {
        ArchDescriptor { family: ModelFamily::LinearRegression, input_dim, num_classes: 1, hidden_dim: 0, l2_reg }
    }

    pub fn linear_svm(input_dim: usize, l2_reg: f64) -> Self {
        ArchDescriptor { family: ModelFamily::LinearSvm, input_dim, num_classes: 2, hidden_dim: 0, l2_reg }
    }

    pub fn softmax(input_dim: usize, num_classes: usize, l2_reg: f64) -> Self {
        ArchDescriptor { family: ModelFamily::SoftmaxClassifier, input_dim, num_classes, hidden_dim: 0, l2_reg }
    }

    pub fn mlp_classifier(input_dim: usize, hidden_dim: usize, num_classes: usize, l2_reg: f64) -> Self {
        ArchDescriptor { family: ModelFamily::MlpClassifier, input_dim, num_classes, hidden_dim, l2_reg }
    }

    pub fn mlp_regressor(input_dim: usize, hidden_dim: usize, l2_reg: f64) -> Self {
        ArchDescriptor { family: ModelFamily::MlpRegressor, input_dim, num_classes: 1, hidden_dim, l2_reg }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.l2_reg < 0.0 || !self.l2_reg.is_finite() {
            return Err(Error::config("l2_reg must be finite and non-negative"));
        }
        match self.family {
            ModelFamily::LinearRegression | ModelFamily::MlpRegressor => {
                if self.num_classes != 1 {
                    return Err(Error::config("regression families use num_classes = 1"));
                }
            }
            ModelFamily::LinearSvm => {
                if self.num_classes != 2 {
                    return Err(Error::config("linear_svm is binary: num_classes must be 2"));
                }
            }
            ModelFamily::SoftmaxClassifier | ModelFamily::MlpClassifier => {
                if self.num_classes < 2 {
                    return Err(Error::config("classifiers need num_classes >= 2"));
                }
            }
        }
        if matches!(self.family, ModelFamily::MlpClassifier | ModelFamily::MlpRegressor)
            && self.hidden_dim == 0
        {
            return Err(Error::config("MLP families need hidden_dim >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.input_dim;
        let c = self.num_classes;
        let h = self.hidden_dim;
        match self.family {
            ModelFamily::LinearRegression | ModelFamily::LinearSvm => d + 1,
            ModelFamily::SoftmaxClassifier => c * d + c,
            ModelFamily::MlpClassifier => h * d + h + c * h + c,
            ModelFamily::MlpRegressor => h * d + h + h + 1,
        }
    }

    /// Named contiguous layers covering the flat parameter vector, in order.
    pub fn layer_index(&self) -> Vec<(&'static str, Range<usize>)> {
        let d = self.input_dim;
        let c = self.num_classes;
        let h = self.hidden_dim;
        match self.family {
            ModelFamily::LinearRegression | ModelFamily::LinearSvm => {
                vec![("weights", 0..d), ("bias", d..d + 1)]
            }
            ModelFamily::SoftmaxClassifier => {
                vec![("weights", 0..c * d), ("bias", c * d..c * d + c)]
            }
            ModelFamily::MlpClassifier => {
                let w1 = h * d;
                vec![
                    ("hidden_weights", 0..w1),
                    ("hidden_bias", w1..w1 + h),
                    ("output_weights", w1 + h..w1 + h + c * h),
                    ("output_bias", w1 + h + c * h..w1 + h + c * h + c),
                ]
            }
            ModelFamily::MlpRegressor => {
                let w1 = h * d;
                vec![
                    ("hidden_weights", 0..w1),
                    ("hidden_bias", w1..w1 + h),
                    ("output_weights", w1 + h..w1 + h + h),
                    ("output_bias", w1 + h + h..w1 + h + h + 1),
                ]
            }
        }
    }

    /// Coordinate ranges subject to the l2 penalty (all weight matrices,
    /// never biases).
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        self.layer_index()
            .into_iter()
            .filter(|(name, _)| name.ends_with("weights"))
            .map(|(_, r)| r)
            .collect()
    }

    /// The slice updated by last-layer fine-tuning. For the MLP families this
    /// is the output weights and bias; a linear model is its own last layer.
    pub fn last_layer_range(&self) -> Range<usize> {
        match self.family {
            ModelFamily::MlpClassifier | ModelFamily::MlpRegressor => {
                let layers = self.layer_index();
                let start = layers
                    .iter()
                    .find(|(n, _)| *n == "output_weights")
                    .map(|(_, r)| r.start)
                    .unwrap();
                start..self.param_count()
            }
            _ => 0..self.param_count(),
        }
    }

    pub fn metric_kind(&self) -> MetricKind {
        match self.family.task_kind() {
            TaskKind::Classification => MetricKind::Accuracy,
            TaskKind::Regression => MetricKind::Mse,
        }
    }
}

/// A flat parameter vector plus the architecture that interprets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchDescriptor,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: ArchDescriptor, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "{} parameter values for an architecture of size {}",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(ModelParams { arch, values })
    }

    pub fn zeros(arch: ArchDescriptor) -> Self {
        ModelParams { values: vec![0.0; arch.param_count()], arch }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.arch
            .layer_index()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, r)| &self.values[r])
    }
}

/// Deterministic initialization: zeros for the linear families, symmetric
/// uniform weights scaled by 1/sqrt(fan_in) with zero biases for the MLPs.
/// The same (arch, seed) pair always produces the same bits.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut values = vec![0.0; arch.param_count()];
    match arch.family {
        ModelFamily::LinearRegression | ModelFamily::LinearSvm | ModelFamily::SoftmaxClassifier => {}
        ModelFamily::MlpClassifier | ModelFamily::MlpRegressor => {
            let mut rng = StreamKey::new(seed).label("init").rng();
            let layers = arch.layer_index();
            for (name, range) in layers {
                let fan_in = match name {
                    "hidden_weights" => arch.input_dim,
                    "output_weights" => arch.hidden_dim,
                    _ => continue,
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in &mut values[range] {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
    }
    Ok(ModelParams { arch: *arch, values })
}

/// Model output for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Per-class scores plus a probability vector summing to 1.
    Classification { scores: Vec<f64>, probs: Vec<f64> },
    Regression(f64),
}

impl Prediction {
    pub fn probs(&self) -> Result<&[f64]> {
        match self {
            Prediction::Classification { probs, .. } => Ok(probs),
            Prediction::Regression(_) => Err(Error::shape("regression output has no probabilities")),
        }
    }

    pub fn value(&self) -> Result<f64> {
        match self {
            Prediction::Regression(v) => Ok(*v),
            Prediction::Classification { .. } => Err(Error::shape("classification output has no scalar")),
        }
    }

    /// Predicted class: argmax of scores, lowest index on ties.
    pub fn argmax(&self) -> Result<usize> {
        match self {
            Prediction::Classification { scores, .. } => Ok(argmax(scores)),
            Prediction::Regression(_) => Err(Error::shape("regression output has no class")),
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn check_input(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.arch.input_dim {
        return Err(Error::shape(format!(
            "input has {} features, model expects {}",
            x.len(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

/// Hinge label mapping: class 0 -> -1, class 1 -> +1.
fn svm_sign(label: &Label) -> Result<f64> {
    Ok(if label.class()? == 0 { -1.0 } else { 1.0 })
}

fn class_scores(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let arch = &params.arch;
    let d = arch.input_dim;
    match arch.family {
        ModelFamily::SoftmaxClassifier => {
            let c = arch.num_classes;
            let (w, b) = (&params.values[..c * d], &params.values[c * d..]);
            (0..c).map(|k| dot(&w[k * d..(k + 1) * d], x) + b[k]).collect()
        }
        ModelFamily::MlpClassifier => {
            let h = arch.hidden_dim;
            let c = arch.num_classes;
            let hid = hidden_activation(params, x);
            let w2_off = h * d + h;
            let w2 = &params.values[w2_off..w2_off + c * h];
            let b2 = &params.values[w2_off + c * h..];
            (0..c).map(|k| dot(&w2[k * h..(k + 1) * h], &hid) + b2[k]).collect()
        }
        ModelFamily::LinearSvm => {
            let f = dot(&params.values[..d], x) + params.values[d];
            vec![-f, f]
        }
        _ => unreachable!("class_scores called on a regression family"),
    }
}

fn regression_output(params: &ModelParams, x: &[f64]) -> f64 {
    let arch = &params.arch;
    let d = arch.input_dim;
    match arch.family {
        ModelFamily::LinearRegression => dot(&params.values[..d], x) + params.values[d],
        ModelFamily::MlpRegressor => {
            let h = arch.hidden_dim;
            let hid = hidden_activation(params, x);
            let w2_off = h * d + h;
            let w2 = &params.values[w2_off..w2_off + h];
            let b2 = params.values[w2_off + h];
            dot(w2, &hid) + b2
        }
        _ => unreachable!("regression_output called on a classification family"),
    }
}

fn hidden_activation(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let arch = &params.arch;
    let d = arch.input_dim;
    let h = arch.hidden_dim;
    let w1 = &params.values[..h * d];
    let b1 = &params.values[h * d..h * d + h];
    (0..h).map(|k| (dot(&w1[k * d..(k + 1) * d], x) + b1[k]).tanh()).collect()
}

pub fn predict(params: &ModelParams, x: &[f64]) -> Result<Prediction> {
    check_input(params, x)?;
    match params.arch.family.task_kind() {
        TaskKind::Classification => {
            let scores = class_scores(params, x);
            let probs = softmax(&scores);
            Ok(Prediction::Classification { scores, probs })
        }
        TaskKind::Regression => Ok(Prediction::Regression(regression_output(params, x))),
    }
}

fn per_example_loss(params: &ModelParams, ex: &Example) -> Result<f64> {
    match params.arch.family {
        ModelFamily::LinearRegression | ModelFamily::MlpRegressor => {
            let pred = regression_output(params, &ex.features);
            let diff = pred - ex.label.value()?;
            Ok(diff * diff)
        }
        ModelFamily::LinearSvm => {
            let d = params.arch.input_dim;
            let f = dot(&params.values[..d], &ex.features) + params.values[d];
            let s = svm_sign(&ex.label)?;
            Ok((1.0 - s * f).max(0.0))
        }
        ModelFamily::SoftmaxClassifier | ModelFamily::MlpClassifier => {
            let scores = class_scores(params, &ex.features);
            let y = ex.label.class()?;
            if y >= scores.len() {
                return Err(Error::data(format!("class {} out of range", y)));
            }
            Ok(log_sum_exp(&scores) - scores[y])
        }
    }
}

fn l2_penalty(params: &ModelParams) -> f64 {
    let mut sq = 0.0;
    for r in params.arch.weight_ranges() {
        for v in &params.values[r] {
            sq += v * v;
        }
    }
    0.5 * params.arch.l2_reg * sq
}

/// Mean per-example loss over the batch plus the l2 penalty.
pub fn loss(params: &ModelParams, batch: &[&Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::data("loss over an empty batch"));
    }
    for ex in batch {
        check_input(params, &ex.features)?;
    }
    let mut total = 0.0;
    for ex in batch {
        total += per_example_loss(params, ex)?;
    }
    Ok(total / batch.len() as f64 + l2_penalty(params))
}

/// Analytic gradient of [`loss`] with respect to every parameter.
pub fn gradient(params: &ModelParams, batch: &[&Example]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::data("gradient over an empty batch"));
    }
    for ex in batch {
        check_input(params, &ex.features)?;
    }
    let arch = &params.arch;
    let d = arch.input_dim;
    let mut g = vec![0.0; params.len()];

    match arch.family {
        ModelFamily::LinearRegression => {
            for ex in batch {
                let x = &ex.features;
                let dz = 2.0 * (regression_output(params, x) - ex.label.value()?);
                for j in 0..d {
                    g[j] += dz * x[j];
                }
                g[d] += dz;
            }
        }
        ModelFamily::LinearSvm => {
            for ex in batch {
                let x = &ex.features;
                let s = svm_sign(&ex.label)?;
                let f = dot(&params.values[..d], x) + params.values[d];
                // hinge is flat at margin exactly 1; only strictly violated
                // margins contribute
                if 1.0 - s * f > 0.0 {
                    for j in 0..d {
                        g[j] += -s * x[j];
                    }
                    g[d] += -s;
                }
            }
        }
        ModelFamily::SoftmaxClassifier => {
            let c = arch.num_classes;
            for ex in batch {
                let x = &ex.features;
                let p = softmax(&class_scores(params, x));
                let y = ex.label.class()?;
                for k in 0..c {
                    let dz = p[k] - if k == y { 1.0 } else { 0.0 };
                    for j in 0..d {
                        g[k * d + j] += dz * x[j];
                    }
                    g[c * d + k] += dz;
                }
            }
        }
        ModelFamily::MlpClassifier => {
            let h = arch.hidden_dim;
            let c = arch.num_classes;
            let w2_off = h * d + h;
            for ex in batch {
                let x = &ex.features;
                let hid = hidden_activation(params, x);
                let scores = class_scores(params, x);
                let p = softmax(&scores);
                let y = ex.label.class()?;
                let mut dhid = vec![0.0; h];
                for k in 0..c {
                    let dz = p[k] - if k == y { 1.0 } else { 0.0 };
                    for m in 0..h {
                        g[w2_off + k * h + m] += dz * hid[m];
                        dhid[m] += dz * params.values[w2_off + k * h + m];
                    }
                    g[w2_off + c * h + k] += dz;
                }
                for m in 0..h {
                    let dpre = dhid[m] * (1.0 - hid[m] * hid[m]);
                    for j in 0..d {
                        g[m * d + j] += dpre * x[j];
                    }
                    g[h * d + m] += dpre;
                }
            }
        }
        ModelFamily::MlpRegressor => {
            let h = arch.hidden_dim;
            let w2_off = h * d + h;
            for ex in batch {
                let x = &ex.features;
                let hid = hidden_activation(params, x);
                let pred = {
                    let w2 = &params.values[w2_off..w2_off + h];
                    dot(w2, &hid) + params.values[w2_off + h]
                };
                let dz = 2.0 * (pred - ex.label.value()?);
                for m in 0..h {
                    g[w2_off + m] += dz * hid[m];
                    let dpre = dz * params.values[w2_off + m] * (1.0 - hid[m] * hid[m]);
                    for j in 0..d {
                        g[m * d + j] += dpre * x[j];
                    }
                    g[h * d + m] += dpre;
                }
                g[w2_off + h] += dz;
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    for v in &mut g {
        *v *= inv;
    }
    if arch.l2_reg > 0.0 {
        for r in arch.weight_ranges() {
            for i in r {
                g[i] += arch.l2_reg * params.values[i];
            }
        }
    }
    Ok(g)
}

/// Feature representation used by nearest-neighbor personalization: the
/// post-activation hidden layer for MLPs, the raw input for linear models.
pub fn representation(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input(params, x)?;
    match params.arch.family {
        ModelFamily::MlpClassifier | ModelFamily::MlpRegressor => Ok(hidden_activation(params, x)),
        _ => Ok(x.to_vec()),
    }
}

/// Task metric on a set of examples: accuracy for classification (argmax,
/// lowest index on ties), mean squared error for regression.
pub fn evaluate_metric(params: &ModelParams, examples: &[&Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::data("metric over an empty example set"));
    }
    match params.arch.family.task_kind() {
        TaskKind::Classification => {
            let mut correct = 0usize;
            for ex in examples {
                let scores = class_scores(params, &ex.features);
                check_input(params, &ex.features)?;
                if argmax(&scores) == ex.label.class()? {
                    correct += 1;
                }
            }
            Ok(correct as f64 / examples.len() as f64)
        }
        TaskKind::Regression => {
            let mut total = 0.0;
            for ex in examples {
                check_input(params, &ex.features)?;
                let diff = regression_output(params, &ex.features) - ex.label.value()?;
                total += diff * diff;
            }
            Ok(total / examples.len() as f64)
        }
    }
}
