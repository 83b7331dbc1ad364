//! Gradient-constrained autoencoder training and gradient-based severity scoring.
//!
//! Training minimizes `J = L_recon - alpha * L_grad`, where `L_grad` is the
//! mean cosine similarity between the current decoder weight gradients of
//! the reconstruction loss and a running mean of those gradients (the
//! reference). The gradient of `L_grad` with respect to the parameters is a
//! Hessian-vector product of `L_recon`, obtained by central differencing of
//! two extra backward passes along the direction `dL_grad/dG`.
//!
//! The severity of an image is `L_recon - alpha * L_grad` evaluated on that
//! image alone: higher means less aligned with the healthy gradients and
//! worse reconstruction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_autoencoder, Autoencoder};
use crate::numerics::{cosine_similarity, dot, Sgd, Tensor};
use crate::seed::rng;
use crate::synthdata::Dataset;

/// Flattened weight gradients, one entry per parameterized decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradientSet {
    pub layers: Vec<Vec<f64>>,
}

/// Cumulative mean of decoder weight gradients seen during training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReferenceGradients {
    layers: Vec<Vec<f64>>,
    count: u64,
}

impl ReferenceGradients {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_parts(layers: Vec<Vec<f64>>, count: u64) -> Self {
        Self { layers, count }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_initialized(&self) -> bool {
        self.count >= 1
    }

    /// Folds one observation into the per-layer running mean.
    pub fn update(&mut self, grads: &LayerGradientSet) -> Result<()> {
        if self.count == 0 {
            self.layers = grads.layers.clone();
            self.count = 1;
            return Ok(());
        }
        check_layers(&grads.layers, &self.layers)?;
        let k = self.count as f64;
        for (mean, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += (v - *m) / (k + 1.0);
            }
        }
        self.count += 1;
        Ok(())
    }
}

/// Functional form of [`ReferenceGradients::update`].
pub fn update_reference(
    reference: &ReferenceGradients,
    grads: &LayerGradientSet,
) -> Result<ReferenceGradients> {
    let mut next = reference.clone();
    next.update(grads)?;
    Ok(next)
}

fn check_layers(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    let la: Vec<usize> = a.iter().map(Vec::len).collect();
    let lb: Vec<usize> = b.iter().map(Vec::len).collect();
    if la != lb {
        return Err(Error::shape("decoder gradient layers", lb, la));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityScore {
    /// `l_recon - alpha * l_grad`; higher is more severe.
    pub value: f64,
    pub l_recon: f64,
    pub l_grad: f64,
}

impl SeverityScore {
    pub fn new(l_recon: f64, l_grad: f64, alpha: f64) -> Self {
        Self {
            value: l_recon - alpha * l_grad,
            l_recon,
            l_grad,
        }
    }

    /// The opposite orientation, `-l_recon + alpha * l_grad`.
    pub fn normality(&self) -> f64 {
        -self.value
    }
}

pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape("reconstruction_loss", x.shape(), x_hat.shape()));
    }
    let n = x.len() as f64;
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn reconstruction_grad(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let n = x.len() as f64;
    let data = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(h, v)| 2.0 * (h - v) / n)
        .collect();
    Tensor::new(x_hat.shape().to_vec(), data)
}

/// Unweighted mean over decoder layers of the cosine similarity between the
/// current gradients and the reference.
pub fn gradient_alignment(current: &LayerGradientSet, reference: &ReferenceGradients) -> Result<f64> {
    if !reference.is_initialized() {
        return Err(Error::InvalidArgument(
            "reference gradients are uninitialized (no training observations)".into(),
        ));
    }
    check_layers(&current.layers, &reference.layers)?;
    if current.layers.is_empty() {
        return Err(Error::InvalidArgument("no decoder layers to align".into()));
    }
    let mut total = 0.0;
    for (g, r) in current.layers.iter().zip(&reference.layers) {
        total += cosine_similarity(g, r)?;
    }
    Ok(total / current.layers.len() as f64)
}

/// `dL_grad / dG` for each layer, with `L_grad` the mean cosine.
fn alignment_direction(current: &LayerGradientSet, reference: &ReferenceGradients) -> Vec<Vec<f64>> {
    let n_layers = current.layers.len() as f64;
    current
        .layers
        .iter()
        .zip(&reference.layers)
        .map(|(g, r)| {
            let ng = dot(g, g).sqrt();
            let nr = dot(r, r).sqrt();
            if ng < 1e-12 || nr < 1e-12 {
                return vec![0.0; g.len()];
            }
            let cos = dot(g, r) / (ng * nr);
            g.iter()
                .zip(r)
                .map(|(gv, rv)| (rv / (ng * nr) - cos * gv / (ng * ng)) / n_layers)
                .collect()
        })
        .collect()
}

pub fn decoder_gradients(model: &Autoencoder) -> LayerGradientSet {
    let layers = model
        .decoder
        .layers()
        .iter()
        .filter_map(|l| l.weight())
        .map(|p| p.grad.data().to_vec())
        .collect();
    LayerGradientSet { layers }
}

/// Runs forward and backward of the reconstruction loss on `batch`
/// (`[B, 1, side, side]`), leaving parameter gradients in the model.
fn recon_pass(model: &mut Autoencoder, batch: &Tensor) -> Result<f64> {
    let x_hat = model.forward(batch)?;
    let loss = reconstruction_loss(batch, &x_hat)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("reconstruction loss is {loss}")));
    }
    model.backward(&reconstruction_grad(batch, &x_hat)?)?;
    Ok(loss)
}

fn all_grads(model: &Autoencoder) -> Vec<f64> {
    model
        .encoder
        .params()
        .into_iter()
        .chain(model.decoder.params())
        .flat_map(|p| p.grad.data().iter().copied())
        .collect()
}

/// Offsets of each decoder weight tensor inside the flat parameter vector.
fn decoder_weight_offsets(model: &Autoencoder) -> Vec<(usize, usize)> {
    let mut offset = model.encoder.param_count();
    let mut out = Vec::new();
    for layer in model.decoder.layers() {
        for (k, p) in layer.params().iter().enumerate() {
            if k == 0 {
                out.push((offset, p.value.len()));
            }
            offset += p.value.len();
        }
    }
    out
}

/// Objective value, its parameter gradient (flat, encoder then decoder), the
/// reconstruction loss, the alignment (if a reference exists) and the raw
/// decoder gradients, all on one batch.
pub struct ObjectiveEval {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub l_recon: f64,
    pub l_grad: Option<f64>,
    pub decoder_grads: LayerGradientSet,
}

/// Evaluates `J = L_recon - alpha * L_grad` and its gradient.
pub fn gradcon_objective(
    model: &mut Autoencoder,
    batch: &Tensor,
    reference: &ReferenceGradients,
    alpha: f64,
) -> Result<ObjectiveEval> {
    let l_recon = recon_pass(model, batch)?;
    let decoder_grads = decoder_gradients(model);
    let mut gradient = all_grads(model);
    if !reference.is_initialized() || alpha == 0.0 {
        return Ok(ObjectiveEval {
            objective: l_recon,
            gradient,
            l_recon,
            l_grad: None,
            decoder_grads,
        });
    }
    let l_grad = gradient_alignment(&decoder_grads, reference)?;
    let direction = alignment_direction(&decoder_grads, reference);
    let v_norm = direction.iter().map(|d| dot(d, d)).sum::<f64>().sqrt();

    if v_norm > 0.0 {
        let theta = model.flat_params();
        let offsets = decoder_weight_offsets(model);
        let theta_dec_norm = offsets
            .iter()
            .map(|&(o, n)| dot(&theta[o..o + n], &theta[o..o + n]))
            .sum::<f64>()
            .sqrt();
        let h = 1e-4 * theta_dec_norm.max(1.0);
        let shifted = |sign: f64| -> Vec<f64> {
            let mut t = theta.clone();
            for (&(o, n), d) in offsets.iter().zip(&direction) {
                for (tv, dv) in t[o..o + n].iter_mut().zip(d) {
                    *tv += sign * h * dv / v_norm;
                }
            }
            t
        };
        model.load_flat_params(&shifted(1.0))?;
        recon_pass(model, batch)?;
        let g_plus = all_grads(model);
        model.load_flat_params(&shifted(-1.0))?;
        recon_pass(model, batch)?;
        let g_minus = all_grads(model);
        model.load_flat_params(&theta)?;

        let scale = v_norm / (2.0 * h);
        for ((g, p), m) in gradient.iter_mut().zip(&g_plus).zip(&g_minus) {
            *g -= alpha * (p - m) * scale;
        }
    }
    Ok(ObjectiveEval {
        objective: l_recon - alpha * l_grad,
        gradient,
        l_recon,
        l_grad: Some(l_grad),
        decoder_grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradconConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub latent_dim: usize,
}

impl Default for GradconConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            epochs: 16,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            latent_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_objective: f64,
    pub mean_recon: f64,
    /// Mean alignment over iterations that had a reference.
    pub mean_grad_alignment: f64,
    /// Mean per-image alignment on the held-out healthy set at epoch end.
    pub holdout_alignment: Option<f64>,
    /// Mean over the epoch's steps of the alignment of one held-out batch
    /// (training batch size) evaluated right after each step.
    pub holdout_batch_alignment: Option<f64>,
    pub holdout_recon: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GradconOutcome {
    pub model: Autoencoder,
    pub reference: ReferenceGradients,
    pub log: Vec<EpochLog>,
    pub iterations: u64,
    pub optimizer: Sgd,
}

pub(crate) fn batch_of(images: &[&Tensor]) -> Result<Tensor> {
    let side = images[0].shape()[0];
    let stacked = Tensor::stack(images)?;
    stacked.reshape(&[images.len(), 1, side, side])
}

/// Trains the autoencoder on healthy images with the gradient constraint.
/// `holdout`, when given, is scored at the end of each epoch.
pub fn train_gradcon(
    healthy: &Dataset,
    holdout: Option<&Dataset>,
    cfg: &GradconConfig,
    seed: u64,
) -> Result<GradconOutcome> {
    if healthy.is_empty() {
        return Err(Error::InvalidArgument("healthy dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("gradcon batch_size and epochs must be positive".into()));
    }
    let side = healthy.samples[0].image.shape()[0];
    let mut model = build_autoencoder(side, cfg.latent_dim, crate::seed::derive_seed(seed, "autoencoder"))?;
    let mut reference = ReferenceGradients::empty();
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut order_rng = rng(crate::seed::derive_seed(seed, "gradcon-order"));
    let mut order: Vec<usize> = (0..healthy.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iterations = 0u64;
    // held-out batches, visited round-robin after every step
    let holdout_batches = match holdout {
        Some(h) if !h.is_empty() => {
            let imgs: Vec<&Tensor> = h.images().collect();
            imgs.chunks(cfg.batch_size).map(batch_of).collect::<Result<Vec<_>>>()?
        }
        _ => Vec::new(),
    };
    let mut next_holdout = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum_j, mut sum_r, mut sum_g, mut n_b, mut n_g) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut sum_hb = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &healthy.samples[i].image).collect();
            let batch = batch_of(&imgs)?;
            let eval = gradcon_objective(&mut model, &batch, &reference, cfg.alpha)?;
            if !eval.objective.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "gradcon objective diverged at epoch {epoch}, iteration {iterations} (objective {})",
                    eval.objective
                )));
            }
            reference.update(&eval.decoder_grads)?;
            let mut offset = 0;
            {
                let mut params: Vec<_> = model
                    .encoder
                    .params_mut()
                    .into_iter()
                    .chain(model.decoder.params_mut())
                    .collect();
                for p in params.iter_mut() {
                    let n = p.grad.len();
                    p.grad.data_mut().copy_from_slice(&eval.gradient[offset..offset + n]);
                    offset += n;
                }
                sgd.step(&mut params)?;
            }
            if !holdout_batches.is_empty() {
                recon_pass(&mut model, &holdout_batches[next_holdout])?;
                sum_hb += gradient_alignment(&decoder_gradients(&model), &reference)?;
                next_holdout = (next_holdout + 1) % holdout_batches.len();
            }
            iterations += 1;
            sum_j += eval.objective;
            sum_r += eval.l_recon;
            n_b += 1;
            if let Some(g) = eval.l_grad {
                sum_g += g;
                n_g += 1;
            }
        }
        let holdout_batch_alignment = (!holdout_batches.is_empty()).then(|| sum_hb / n_b as f64);
        let (holdout_alignment, holdout_recon) = match holdout {
            Some(h) if !h.is_empty() => {
                let mut scorer = SeverityScorer::new(&model, &reference, cfg.alpha)?;
                let scores = h
                    .images()
                    .map(|x| scorer.score(x))
                    .collect::<Result<Vec<_>>>()?;
                let n = scores.len() as f64;
                (
                    Some(scores.iter().map(|s| s.l_grad).sum::<f64>() / n),
                    Some(scores.iter().map(|s| s.l_recon).sum::<f64>() / n),
                )
            }
            _ => (None, None),
        };
        log.push(EpochLog {
            epoch,
            mean_objective: sum_j / n_b as f64,
            mean_recon: sum_r / n_b as f64,
            mean_grad_alignment: if n_g > 0 { sum_g / n_g as f64 } else { f64::NAN },
            holdout_alignment,
            holdout_batch_alignment,
            holdout_recon,
        });
    }
    model.encoder.clear_caches();
    model.decoder.clear_caches();
    Ok(GradconOutcome {
        model,
        reference,
        log,
        iterations,
        optimizer: sgd,
    })
}

/// Mean alignment of the batch reconstruction gradient over consecutive
/// batches of `data`, i.e. the constrained quantity evaluated on unseen images.
pub fn held_out_batch_alignment(
    model: &Autoencoder,
    reference: &ReferenceGradients,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let mut workspace = model.clone();
    let imgs: Vec<&Tensor> = data.images().collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in imgs.chunks(batch_size.max(1)) {
        recon_pass(&mut workspace, &batch_of(chunk)?)?;
        total += gradient_alignment(&decoder_gradients(&workspace), reference)?;
        n += 1;
    }
    Ok(total / n as f64)
}

/// Scores images one at a time against a fixed model and reference. Owns a
/// private copy of the model as backward workspace, so the caller's model is
/// never touched.
pub struct SeverityScorer<'a> {
    workspace: Autoencoder,
    reference: &'a ReferenceGradients,
    alpha: f64,
}

impl<'a> SeverityScorer<'a> {
    pub fn new(model: &Autoencoder, reference: &'a ReferenceGradients, alpha: f64) -> Result<Self> {
        if !reference.is_initialized() {
            return Err(Error::InvalidArgument(
                "cannot score: reference gradients are uninitialized".into(),
            ));
        }
        Ok(Self {
            workspace: model.clone(),
            reference,
            alpha,
        })
    }

    pub fn score(&mut self, image: &Tensor) -> Result<SeverityScore> {
        let side = self.workspace.image_side;
        let x = image.clone().reshape(&[1, 1, side, side]).map_err(|_| {
            Error::shape("severity_score input", [side, side], image.shape())
        })?;
        let l_recon = recon_pass(&mut self.workspace, &x)?;
        let l_grad = gradient_alignment(&decoder_gradients(&self.workspace), self.reference)?;
        Ok(SeverityScore::new(l_recon, l_grad, self.alpha))
    }
}

/// Severity of a single image; model and reference are left unchanged.
pub fn severity_score(
    model: &Autoencoder,
    reference: &ReferenceGradients,
    x: &Tensor,
    alpha: f64,
) -> Result<SeverityScore> {
    SeverityScorer::new(model, reference, alpha)?.score(x)
}

pub fn score_dataset(
    model: &Autoencoder,
    reference: &ReferenceGradients,
    data: &Dataset,
    alpha: f64,
) -> Result<Vec<SeverityScore>> {
    let mut scorer = SeverityScorer::new(model, reference, alpha)?;
    data.images().map(|x| scorer.score(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(layers: Vec<Vec<f64>>) -> LayerGradientSet {
        LayerGradientSet { layers }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(reconstruction_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&z, &Tensor::vector(vec![1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(
            reconstruction_loss(&Tensor::vector(vec![0.0, 2.0]), &z).unwrap(),
            2.0
        );
        assert!(reconstruction_loss(&z, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn alignment_examples() {
        let g = set(vec![vec![1.0, 2.0], vec![3.0, -1.0, 0.5]]);
        let mut r = ReferenceGradients::empty();
        assert!(gradient_alignment(&g, &r).is_err());
        r.update(&g).unwrap();
        assert!((gradient_alignment(&g, &r).unwrap() - 1.0).abs() < 1e-12);
        let neg = set(g.layers.iter().map(|l| l.iter().map(|v| -v).collect()).collect());
        assert!((gradient_alignment(&neg, &r).unwrap() + 1.0).abs() < 1e-12);

        let r2 = ReferenceGradients::from_parts(vec![vec![1.0, 0.0], vec![1.0, 0.0]], 1);
        let c = set(vec![vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert!((gradient_alignment(&c, &r2).unwrap() - 0.5).abs() < 1e-15);
        assert!(gradient_alignment(&set(vec![vec![1.0]]), &r2).is_err());
    }

    #[test]
    fn reference_running_mean() {
        let r0 = ReferenceGradients::empty();
        let r1 = update_reference(&r0, &set(vec![vec![1.0, 0.0]])).unwrap();
        assert_eq!(r1.layers(), &[vec![1.0, 0.0]]);
        assert_eq!(r1.count(), 1);
        let r2 = update_reference(&r1, &set(vec![vec![0.0, 1.0]])).unwrap();
        assert_eq!(r2.layers(), &[vec![0.5, 0.5]]);
        assert_eq!(r2.count(), 2);
        let r3 = update_reference(&r2, &set(r2.layers().to_vec())).unwrap();
        assert_eq!(r3.layers(), r2.layers());
        assert_eq!(r3.count(), 3);
        assert!(update_reference(&r3, &set(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn score_formula() {
        let s = SeverityScore::new(0.04, 0.9, 0.03);
        assert!((s.value - 0.013).abs() < 1e-15);
        assert_eq!(s.normality(), -s.value);
        assert_eq!(SeverityScore::new(0.04, 0.9, 0.0).value, 0.04);
    }
}
