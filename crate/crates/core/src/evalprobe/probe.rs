use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, f1, roc_auc};
use crate::contrastive::Normalization;
use crate::error::{Error, Result};
use crate::models::{build_classifier_head, Backbone, ClassifierHead};
use crate::numerics::{sigmoid, Param, Sgd, Tensor};
use crate::seed::{derive_seed, rng};
use crate::synthdata::{Dataset, LabeledSplits, BIOMARKER_NAMES, N_BIOMARKERS};

/// Frozen representations of every image, `[N, embedding_dim]`.
pub fn extract_features(backbone: &Backbone, data: &Dataset, norm: &Normalization) -> Result<Tensor> {
    let side = backbone.image_side;
    let mut out = Vec::with_capacity(data.len() * backbone.embedding_dim);
    let images: Vec<&Tensor> = data.images().collect();
    for chunk in images.chunks(64) {
        let mut pixels = Vec::with_capacity(chunk.len() * side * side);
        for img in chunk {
            pixels.extend_from_slice(norm.apply(img).data());
        }
        let batch = Tensor::new(vec![chunk.len(), 1, side, side], pixels)?;
        out.extend_from_slice(backbone.embed_batch(&batch)?.data());
    }
    Tensor::new(vec![data.len(), backbone.embedding_dim], out)
}

/// Per-dimension standardization fitted on training features. Constant
/// dimensions pass through unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = (features.batch() as f64, features.row_len());
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for i in 0..features.batch() {
            for (k, v) in features.row(i).iter().enumerate() {
                mean[k] += v / n;
                sq[k] += v * v / n;
            }
        }
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let sd = (s - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.row_len() != d {
            return Err(Error::shape("feature scaler", d, features.row_len()));
        }
        let mut data = features.data().to_vec();
        for row in data.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Tensor::new(features.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Presence of one biomarker, by index.
    Binary(usize),
    MultiLabel,
}

impl ProbeTask {
    pub fn outputs(self) -> usize {
        match self {
            ProbeTask::Binary(_) => 1,
            ProbeTask::MultiLabel => N_BIOMARKERS,
        }
    }

    /// Row-major `[N, outputs]` 0/1 targets.
    pub fn targets(self, data: &Dataset) -> Result<Vec<f64>> {
        let as_f64 = |v: &[bool]| v.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
        match self {
            ProbeTask::Binary(b) => Ok(as_f64(&data.label_column(b)?)),
            ProbeTask::MultiLabel => Ok(data
                .label_matrix()?
                .iter()
                .flat_map(|row| as_f64(row))
                .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

/// Standardization followed by one dense layer with sigmoid outputs.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub task: ProbeTask,
    pub scaler: FeatureScaler,
    pub head: ClassifierHead,
}

impl LinearProbe {
    /// Positive-class probabilities, `[N, outputs]`.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let logits = self.head.net.infer(&self.scaler.apply(features)?)?;
        let data = logits.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::new(logits.shape().to_vec(), data)
    }
}

/// Minibatch SGD on mean sigmoid cross-entropy, updating only `head`.
pub fn train_head_on_features(
    head: &mut ClassifierHead,
    features: &Tensor,
    targets: &[f64],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, k) = (features.batch(), head.outputs());
    if n == 0 {
        return Err(Error::InvalidArgument("probe training set is empty".into()));
    }
    if targets.len() != n * k {
        return Err(Error::shape("probe targets", n * k, targets.len()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be positive".into()));
    }
    let d = features.row_len();
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut r = rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| features.row(i).to_vec()).collect();
            let logits = head.net.forward(&Tensor::new(vec![chunk.len(), d], x)?)?;
            let scale = 1.0 / (chunk.len() * k) as f64;
            let mut grad = Vec::with_capacity(chunk.len() * k);
            for (row, &i) in chunk.iter().enumerate() {
                for j in 0..k {
                    let l = logits.data()[row * k + j];
                    let y = targets[i * k + j];
                    // softplus(l) - y l, written to avoid overflow
                    total += (l.max(0.0) + (-l.abs()).exp().ln_1p() - y * l) * scale;
                    grad.push((sigmoid(l) - y) * scale);
                }
            }
            head.net.backward(&Tensor::new(vec![chunk.len(), k], grad)?)?;
            let mut params: Vec<&mut Param> = head.net.params_mut();
            sgd.step(&mut params)?;
        }
        if !total.is_finite() {
            return Err(Error::Numerical("probe loss diverged".into()));
        }
        curve.push(total * cfg.batch_size.min(n) as f64 / n as f64);
    }
    head.net.clear_caches();
    Ok(curve)
}

/// Trains a linear probe for `task` on top of the frozen backbone.
pub fn train_probe(
    backbone: &Backbone,
    train: &Dataset,
    task: ProbeTask,
    norm: &Normalization,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe> {
    let targets = task.targets(train)?;
    let features = extract_features(backbone, train, norm)?;
    let scaler = FeatureScaler::fit(&features);
    let mut head = build_classifier_head(backbone.embedding_dim, task.outputs(), derive_seed(seed, "probe-head"))?;
    train_head_on_features(&mut head, &scaler.apply(&features)?, &targets, cfg, derive_seed(seed, "probe-order"))?;
    Ok(LinearProbe { task, scaler, head })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub biomarker: String,
    pub accuracy: f64,
    pub f1: f64,
    pub n_test: usize,
    pub n_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub method: String,
    pub binary: Vec<BinaryMetrics>,
    pub per_label_auc: Vec<f64>,
    pub mean_auc: f64,
    pub warnings: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// One binary probe per biomarker plus one multi-label probe.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub binary: Vec<LinearProbe>,
    pub multilabel: LinearProbe,
}

/// Seed of one task's probe within a probe set seeded with `set_seed`.
pub fn probe_task_seed(set_seed: u64, task: ProbeTask) -> u64 {
    match task {
        ProbeTask::Binary(b) => derive_seed(set_seed, &format!("probe-{}", BIOMARKER_NAMES[b])),
        ProbeTask::MultiLabel => derive_seed(set_seed, "probe-multi"),
    }
}

pub fn train_probe_set(
    backbone: &Backbone,
    train: &Dataset,
    norm: &Normalization,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeSet> {
    let binary = (0..N_BIOMARKERS)
        .map(|b| {
            let task = ProbeTask::Binary(b);
            train_probe(backbone, train, task, norm, cfg, probe_task_seed(seed, task))
        })
        .collect::<Result<Vec<_>>>()?;
    let task = ProbeTask::MultiLabel;
    let multilabel = train_probe(backbone, train, task, norm, cfg, probe_task_seed(seed, task))?;
    Ok(ProbeSet { binary, multilabel })
}

/// Accuracy and F1 (threshold 0.5) on each balanced binary test set, and
/// per-label AUC on the multi-label test set.
pub fn evaluate(
    backbone: &Backbone,
    probes: &ProbeSet,
    splits: &LabeledSplits,
    norm: &Normalization,
    method: &str,
) -> Result<ProbeResult> {
    if probes.binary.len() != splits.binary_tests.len() {
        return Err(Error::shape("binary probes", splits.binary_tests.len(), probes.binary.len()));
    }
    let mut warnings = Vec::new();
    let mut binary = Vec::with_capacity(probes.binary.len());
    for (probe, test) in probes.binary.iter().zip(&splits.binary_tests) {
        let ProbeTask::Binary(b) = probe.task else {
            return Err(Error::InvalidArgument("expected a binary probe".into()));
        };
        let labels = test.label_column(b)?;
        let probs = probe.predict(&extract_features(backbone, test, norm)?)?;
        let preds: Vec<bool> = probs.data().iter().map(|&p| p >= 0.5).collect();
        let n_positive = labels.iter().filter(|&&l| l).count();
        if 2 * n_positive != labels.len() {
            warnings.push(format!(
                "{} test set is unbalanced ({n_positive} of {} positive)",
                BIOMARKER_NAMES[b],
                labels.len()
            ));
        }
        binary.push(BinaryMetrics {
            biomarker: BIOMARKER_NAMES[b].to_string(),
            accuracy: accuracy(&preds, &labels)?,
            f1: f1(&preds, &labels)?,
            n_test: labels.len(),
            n_positive,
        });
    }
    let test = &splits.multilabel_test;
    let probs = probes.multilabel.predict(&extract_features(backbone, test, norm)?)?;
    let per_label_auc = (0..N_BIOMARKERS)
        .map(|b| {
            let scores: Vec<f64> = (0..test.len()).map(|i| probs.row(i)[b]).collect();
            roc_auc(&scores, &test.label_column(b)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_auc = per_label_auc.iter().sum::<f64>() / per_label_auc.len() as f64;
    Ok(ProbeResult {
        method: method.to_string(),
        binary,
        per_label_auc,
        mean_auc,
        warnings,
        seed: None,
        config_hash: None,
    })
}

/// Clinical column names of the summary table and the synthetic biomarker
/// standing in for each.
pub const TABLE_COLUMNS: [(&str, usize); N_BIOMARKERS] =
    [("IRF", 0), ("DME", 3), ("IRHRF", 1), ("FAVF", 4), ("PAVF", 2)];

pub const TABLE_HEADER: &str = "method,IRF,DME,IRHRF,FAVF,PAVF,multi_label";

/// `method,acc/f1 x 5,mean_auc` with four decimals.
pub fn table_row(result: &ProbeResult) -> Result<String> {
    let mut cells = vec![result.method.clone()];
    for (name, b) in TABLE_COLUMNS {
        let m = result
            .binary
            .iter()
            .find(|m| m.biomarker == BIOMARKER_NAMES[b])
            .ok_or_else(|| Error::InvalidArgument(format!("result has no {name} column")))?;
        cells.push(format!("{:.4}/{:.4}", m.accuracy, m.f1));
    }
    cells.push(format!("{:.4}", result.mean_auc));
    Ok(cells.join(","))
}

pub fn write_table(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in results {
        out.push_str(&table_row(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
