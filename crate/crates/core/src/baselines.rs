//! Classifier-based anomaly scorers (MSP, ODIN, Mahalanobis) and the harness
//! that swaps them in for the severity score ahead of pretraining.
//!
//! All scores are oriented like the severity score: higher means more
//! anomalous.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::Normalization;
use crate::error::{Error, Result};
use crate::evalprobe::{Pretraining, TransferSetup};
use crate::labeling::assign_severity_labels;
use crate::models::{build_backbone, build_classifier_head, Backbone, BackboneConfig, ClassifierHead};
use crate::numerics::{sigmoid, softmax, Param, Sgd, Tensor};
use crate::seed::{derive_seed, rng};
use crate::synthdata::{Dataset, N_BIOMARKERS};

/// Maximum softmax probability of `logits`, in `(0, 1]`.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("msp needs at least two logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logit".into()));
    }
    Ok(softmax(logits).into_iter().fold(0.0, f64::max))
}

fn temperature_msp(logits: &[f64], temperature: f64) -> Result<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    msp_score(&scaled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

/// Backbone with a multi-label sigmoid head and an auxiliary softmax head
/// over the label combinations seen in training.
#[derive(Debug, Clone)]
pub struct SupervisedClassifier {
    pub backbone: Backbone,
    pub multilabel: ClassifierHead,
    pub categorical: ClassifierHead,
    /// Label combination of each categorical class.
    pub combos: Vec<[bool; N_BIOMARKERS]>,
    pub normalization: Normalization,
}

fn combo_bits(c: &[bool; N_BIOMARKERS]) -> u32 {
    c.iter().enumerate().map(|(i, &b)| u32::from(b) << i).sum()
}

impl SupervisedClassifier {
    fn input_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let side = self.backbone.image_side;
        let mut pixels = Vec::with_capacity(images.len() * side * side);
        for img in images {
            pixels.extend_from_slice(self.normalization.apply(img).data());
        }
        Tensor::new(vec![images.len(), 1, side, side], pixels)
    }

    /// Penultimate features `[B, embedding_dim]` of normalized inputs.
    pub fn features_of(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.embed_batch(x)
    }

    /// Categorical logits `[B, classes]` of normalized inputs.
    pub fn logits_of(&self, x: &Tensor) -> Result<Tensor> {
        self.categorical.net.infer(&self.features_of(x)?)
    }

    pub fn features(&self, data: &Dataset) -> Result<Tensor> {
        self.batched(data, |x| self.features_of(x))
    }

    pub fn logits(&self, data: &Dataset) -> Result<Tensor> {
        self.batched(data, |x| self.logits_of(x))
    }

    /// Multi-label presence probabilities `[N, 5]`.
    pub fn presence(&self, data: &Dataset) -> Result<Tensor> {
        let logits = self.batched(data, |x| self.multilabel.net.infer(&self.features_of(x)?))?;
        let p = logits.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::new(logits.shape().to_vec(), p)
    }

    fn batched(&self, data: &Dataset, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        let images: Vec<&Tensor> = data.images().collect();
        let mut out = Vec::new();
        let mut width = 0;
        for chunk in images.chunks(64) {
            let y = f(&self.input_batch(chunk)?)?;
            width = y.row_len();
            out.extend_from_slice(y.data());
        }
        Tensor::new(vec![images.len(), width], out)
    }

    /// Class index of each labeled sample.
    pub fn class_of(&self, data: &Dataset) -> Result<Vec<usize>> {
        data.label_matrix()?
            .iter()
            .map(|c| {
                self.combos
                    .iter()
                    .position(|k| k == c)
                    .ok_or_else(|| Error::InvalidArgument("label combination unseen in training".into()))
            })
            .collect()
    }
}

/// Trains backbone and both heads jointly with per-label binary
/// cross-entropy plus softmax cross-entropy over label combinations.
pub fn train_supervised_classifier(
    train: &Dataset,
    backbone_cfg: &BackboneConfig,
    normalization: Normalization,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<SupervisedClassifier> {
    let matrix = train.label_matrix()?;
    if matrix.is_empty() {
        return Err(Error::InvalidArgument("classifier training set is empty".into()));
    }
    let mut combos: Vec<[bool; N_BIOMARKERS]> = matrix.clone();
    combos.sort_by_key(combo_bits);
    combos.dedup();
    if combos.len() < 2 {
        return Err(Error::InvalidArgument("need at least two label combinations for a softmax".into()));
    }
    let dim = backbone_cfg.embedding_dim;
    let mut model = SupervisedClassifier {
        backbone: build_backbone(backbone_cfg, derive_seed(seed, "classifier-backbone"))?,
        multilabel: build_classifier_head(dim, N_BIOMARKERS, derive_seed(seed, "classifier-multilabel"))?,
        categorical: build_classifier_head(dim, combos.len(), derive_seed(seed, "classifier-categorical"))?,
        combos,
        normalization,
    };
    let classes = model.class_of(train)?;
    let k = model.combos.len();
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut order_rng = rng(derive_seed(seed, "classifier-order"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &train.samples[i].image).collect();
            let x = model.input_batch(&images)?;
            let feats = model.backbone.forward(&x)?;
            let ml = model.multilabel.net.forward(&feats)?;
            let cat = model.categorical.net.forward(&feats)?;
            let b = chunk.len() as f64;
            let mut g_ml = Vec::with_capacity(chunk.len() * N_BIOMARKERS);
            let mut g_cat = Vec::with_capacity(chunk.len() * k);
            let mut loss = 0.0;
            for (row, &i) in chunk.iter().enumerate() {
                for (j, &y) in matrix[i].iter().enumerate() {
                    let l = ml.row(row)[j];
                    let y = f64::from(u8::from(y));
                    loss += (l.max(0.0) + (-l.abs()).exp().ln_1p() - y * l) / (b * N_BIOMARKERS as f64);
                    g_ml.push((sigmoid(l) - y) / (b * N_BIOMARKERS as f64));
                }
                let p = softmax(cat.row(row));
                loss -= p[classes[i]].max(1e-300).ln() / b;
                for (c, pc) in p.iter().enumerate() {
                    g_cat.push((pc - f64::from(u8::from(c == classes[i]))) / b);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("classifier loss diverged in epoch {epoch}")));
            }
            let d1 = model.multilabel.net.backward(&Tensor::new(vec![chunk.len(), N_BIOMARKERS], g_ml)?)?;
            let d2 = model.categorical.net.backward(&Tensor::new(vec![chunk.len(), k], g_cat)?)?;
            let dfeat: Vec<f64> = d1.data().iter().zip(d2.data()).map(|(a, c)| a + c).collect();
            model.backbone.net.backward(&Tensor::new(feats.shape().to_vec(), dfeat)?)?;
            let mut params: Vec<&mut Param> = model
                .backbone
                .net
                .params_mut()
                .into_iter()
                .chain(model.multilabel.net.params_mut())
                .chain(model.categorical.net.params_mut())
                .collect();
            sgd.step(&mut params)?;
        }
    }
    model.backbone.net.clear_caches();
    model.multilabel.net.clear_caches();
    model.categorical.net.clear_caches();
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdinParams {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for OdinParams {
    fn default() -> Self {
        Self {
            temperature: 1000.0,
            epsilon: 0.0014,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves each normalized input `[B, 1, S, S]` by `epsilon` against the sign
/// of the gradient of the temperature-scaled cross-entropy at its predicted
/// class.
pub fn odin_perturb(model: &SupervisedClassifier, x: &Tensor, params: OdinParams) -> Result<Tensor> {
    if !(params.temperature > 0.0) || !(params.epsilon >= 0.0) {
        return Err(Error::InvalidArgument("ODIN needs T > 0 and epsilon >= 0".into()));
    }
    if params.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut backbone = model.backbone.clone();
    let mut head = model.categorical.clone();
    let logits = head.net.forward(&backbone.forward(x)?)?;
    let k = logits.row_len();
    let t = params.temperature;
    let mut grad = Vec::with_capacity(logits.len());
    for row in 0..logits.batch() {
        let l = logits.row(row);
        let pred = (0..k).fold(0, |best, c| if l[c] > l[best] { c } else { best });
        let scaled: Vec<f64> = l.iter().map(|v| v / t).collect();
        for (c, p) in softmax(&scaled).into_iter().enumerate() {
            grad.push((p - f64::from(u8::from(c == pred))) / t);
        }
    }
    let df = head.net.backward(&Tensor::new(logits.shape().to_vec(), grad)?)?;
    let dx = backbone.net.backward(&df)?;
    if !dx.is_finite() {
        return Err(Error::Numerical("non-finite ODIN input gradient".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(dx.data())
        .map(|(v, g)| v - params.epsilon * sign(*g))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Tied-covariance Gaussian class model on penultimate features.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassStats {
    pub means: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub epsilon: f64,
}

impl GaussianClassStats {
    /// Inverts `covariance + epsilon I` by Cholesky.
    pub fn from_parts(means: Vec<DVector<f64>>, covariance: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let d = covariance.nrows();
        if covariance.ncols() != d || means.iter().any(|m| m.len() != d) || means.is_empty() {
            return Err(Error::shape("gaussian class stats", d, covariance.ncols()));
        }
        let regularized = &covariance + DMatrix::identity(d, d) * epsilon;
        let chol = regularized.clone().cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "covariance is not positive definite even with epsilon = {epsilon} on the diagonal"
            ))
        })?;
        Ok(Self {
            means,
            covariance: regularized,
            precision: chol.inverse(),
            epsilon,
        })
    }

    /// Class means and the pooled within-class covariance of `features`.
    pub fn fit(features: &Tensor, classes: &[usize], n_classes: usize, epsilon: f64) -> Result<Self> {
        let (n, d) = (features.batch(), features.row_len());
        if classes.len() != n || n == 0 {
            return Err(Error::shape("mahalanobis fit", n, classes.len()));
        }
        let mut sums = vec![DVector::zeros(d); n_classes];
        let mut counts = vec![0usize; n_classes];
        for (i, &c) in classes.iter().enumerate() {
            sums[c] += DVector::from_column_slice(features.row(i));
            counts[c] += 1;
        }
        let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
        let means: Vec<DVector<f64>> = present.iter().map(|&c| &sums[c] / counts[c] as f64).collect();
        let index_of: Vec<Option<usize>> = (0..n_classes).map(|c| present.iter().position(|&p| p == c)).collect();
        let mut cov = DMatrix::zeros(d, d);
        for (i, &c) in classes.iter().enumerate() {
            let centered = DVector::from_column_slice(features.row(i)) - &means[index_of[c].expect("seen class")];
            cov.ger(1.0, &centered, &centered, 1.0);
        }
        cov /= n as f64;
        Self::from_parts(means, cov, epsilon)
    }
}

/// Squared Mahalanobis distance to the nearest class mean.
pub fn mahalanobis_score(stats: &GaussianClassStats, feature: &[f64]) -> Result<f64> {
    let d = stats.precision.nrows();
    if feature.len() != d {
        return Err(Error::shape("mahalanobis feature", d, feature.len()));
    }
    let f = DVector::from_column_slice(feature);
    Ok(stats
        .means
        .iter()
        .map(|m| {
            let c = &f - m;
            c.dot(&(&stats.precision * &c))
        })
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scorer {
    Severity,
    Msp,
    Odin(OdinParams),
    Mahalanobis { epsilon: f64 },
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Severity => "severity",
            Scorer::Msp => "msp",
            Scorer::Odin(_) => "odin",
            Scorer::Mahalanobis { .. } => "mahalanobis",
        }
    }
}

/// Anomaly scores (higher is more anomalous) of every image from the
/// classifier; the severity scorer is not classifier based.
pub fn classifier_scores(
    scorer: Scorer,
    model: &SupervisedClassifier,
    data: &Dataset,
    fit_on: &Dataset,
) -> Result<Vec<f64>> {
    let images: Vec<&Tensor> = data.images().collect();
    match scorer {
        Scorer::Severity => Err(Error::InvalidArgument(
            "the severity scorer comes from the gradient-constrained autoencoder".into(),
        )),
        Scorer::Msp => {
            let logits = model.logits(data)?;
            (0..logits.batch()).map(|i| Ok(-msp_score(logits.row(i))?)).collect()
        }
        Scorer::Odin(params) => {
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(64) {
                let x = odin_perturb(model, &model.input_batch(chunk)?, params)?;
                let logits = model.logits_of(&x)?;
                for i in 0..logits.batch() {
                    out.push(-temperature_msp(logits.row(i), params.temperature)?);
                }
            }
            Ok(out)
        }
        Scorer::Mahalanobis { epsilon } => {
            let classes = model.class_of(fit_on)?;
            let stats = GaussianClassStats::fit(&model.features(fit_on)?, &classes, model.combos.len(), epsilon)?;
            let feats = model.features(data)?;
            (0..feats.batch()).map(|i| mahalanobis_score(&stats, feats.row(i))).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scorer: String,
    pub n_bins: usize,
    pub mean_auc: f64,
}

pub const ABLATION_HEADER: &str = "scorer,n_bins,mean_auc";

/// One row per scorer: bin its scores, pretrain on the bins with the shared
/// setup and report the probe mean AUC.
pub fn ablation_run(
    scores: &[(String, Vec<f64>)],
    n_bins: usize,
    setup: &TransferSetup,
) -> Result<Vec<AblationRow>> {
    scores
        .iter()
        .map(|(name, s)| {
            if s.len() != setup.unlabeled.len() {
                return Err(Error::shape("ablation scores", setup.unlabeled.len(), s.len()));
            }
            let labels = assign_severity_labels(s, n_bins)?.labels;
            let result = setup.run(&Pretraining::Severity(&labels), name)?;
            Ok(AblationRow {
                scorer: name.clone(),
                n_bins,
                mean_auc: result.mean_auc,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.scorer, r.n_bins, r.mean_auc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msp_examples() {
        assert!((msp_score(&[0.3; 4]).unwrap() - 0.25).abs() < 1e-15);
        let e2 = 2f64.exp();
        assert!((msp_score(&[2.0, 0.0, 0.0]).unwrap() - e2 / (e2 + 2.0)).abs() < 1e-15);
        assert!((msp_score(&[2.0, 0.0, 0.0]).unwrap() - 0.78698).abs() < 1e-5);
        let a = msp_score(&[1.0, -0.5, 0.25]).unwrap();
        let b = msp_score(&[101.0, 99.5, 100.25]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(msp_score(&[1.0]).is_err());
        assert!(msp_score(&[1.0, f64::NAN]).is_err());
        assert_eq!(temperature_msp(&[1.0, -0.5, 0.25], 1.0).unwrap(), a);
    }

    #[test]
    fn mahalanobis_examples() {
        let stats = GaussianClassStats::from_parts(vec![DVector::zeros(2)], DMatrix::identity(2, 2), 0.0).unwrap();
        assert!((mahalanobis_score(&stats, &[3.0, 4.0]).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(mahalanobis_score(&stats, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(mahalanobis_score(&stats, &[1.0]).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = GaussianClassStats::from_parts(vec![DVector::zeros(2)], singular, 0.0).unwrap_err();
        assert!(err.to_string().contains("epsilon"));
    }

    #[test]
    fn mahalanobis_fit_recovers_pooled_covariance() {
        // two classes, each {mean +- (1, 0)}: pooled covariance diag(1, 0) + eps
        let f = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 5.0, 2.0, 3.0, 2.0]).unwrap();
        let stats = GaussianClassStats::fit(&f, &[0, 0, 1, 1], 2, 1e-3).unwrap();
        assert_eq!(stats.means[1].as_slice(), &[4.0, 2.0]);
        assert!((stats.covariance[(0, 0)] - 1.001).abs() < 1e-12);
        assert!((stats.covariance[(1, 1)] - 0.001).abs() < 1e-12);
        assert_eq!(mahalanobis_score(&stats, &[4.0, 2.0]).unwrap(), 0.0);
    }
}
