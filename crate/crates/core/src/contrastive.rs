//! Supervised contrastive pretraining on severity pseudo-labels.
//!
//! Each step draws `B` source images, renders two augmented views of each,
//! embeds and projects them to the unit sphere and minimizes the supervised
//! contrastive loss, where the positives of an anchor are all other views
//! sharing its label. With one label per source this is the SimCLR loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Backbone, ProjectionHead};
use crate::numerics::{Param, Sgd, Tensor};
use crate::seed::{derive_seed, mix, rng};
use crate::synthdata::Dataset;

/// `(x - mean) / std`, applied to every pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl Normalization {
    /// Pixel mean and standard deviation over a whole dataset.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for img in data.images() {
            for &v in img.data() {
                n += 1.0;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0.0 {
            return Err(Error::InvalidArgument("cannot fit normalization on no pixels".into()));
        }
        let mean = sum / n;
        let std = (sq / n - mean * mean).max(0.0).sqrt();
        if std < 1e-12 {
            return Err(Error::InvalidArgument("constant images have no spread to normalize".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let data = image.data().iter().map(|v| (v - self.mean) / self.std).collect();
        Tensor::new(image.shape().to_vec(), data).expect("same shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    pub normalization: Normalization,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            normalization: Normalization::default(),
        }
    }
}

impl AugmentationPolicy {
    /// No crop, flip or jitter; only normalization.
    pub fn identity(normalization: Normalization) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            normalization,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop_scale)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("jitter factors must be in [0, 1)".into()));
        }
        if !(self.normalization.std > 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

pub fn hflip(image: &Tensor) -> Tensor {
    let side = image.shape()[0];
    let mut out = image.data().to_vec();
    for row in out.chunks_mut(side) {
        row.reverse();
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Resamples the square `[x0, x0 + size) x [y0, y0 + size)` of `image` back
/// to the full side with bilinear interpolation.
fn crop_resize(image: &Tensor, x0: f64, y0: f64, size: f64) -> Tensor {
    let side = image.shape()[0];
    let src = image.data();
    let scale = size / side as f64;
    let at = |y: usize, x: usize| src[y * side + x];
    let coord = |o: f64, u: usize| -> (usize, usize, f64) {
        let c = (o + (u as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(side - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(side * side);
    for v in 0..side {
        let (y0i, y1i, fy) = coord(y0, v);
        for u in 0..side {
            let (x0i, x1i, fx) = coord(x0, u);
            let top = at(y0i, x0i) * (1.0 - fx) + at(y0i, x1i) * fx;
            let bottom = at(y1i, x0i) * (1.0 - fx) + at(y1i, x1i) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![side, side], out).expect("square image")
}

/// One random view of a `[side, side]` image in `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(policy: &AugmentationPolicy, image: &Tensor, rng: &mut R) -> Result<Tensor> {
    policy.validate()?;
    if image.shape().len() != 2 || image.shape()[0] != image.shape()[1] || image.is_empty() {
        return Err(Error::shape("augment", "[side, side]", image.shape()));
    }
    let side = image.shape()[0] as f64;
    let (lo, hi) = policy.crop_scale;
    let area = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let size = area.sqrt() * side;
    let slack = side - size;
    let (x0, y0) = if slack > 0.0 {
        (rng.gen_range(0.0..=slack), rng.gen_range(0.0..=slack))
    } else {
        (0.0, 0.0)
    };
    let mut view = crop_resize(image, x0, y0, size);
    if policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob) {
        view = hflip(&view);
    }
    if policy.brightness > 0.0 || policy.contrast > 0.0 {
        let b = 1.0 + jitter(rng, policy.brightness);
        let c = 1.0 + jitter(rng, policy.contrast);
        let mean = view.data().iter().sum::<f64>() / view.len() as f64 * b;
        for v in view.data_mut() {
            *v = (((*v * b) - mean) * c + mean).clamp(0.0, 1.0);
        }
    }
    Ok(policy.normalization.apply(&view))
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, amount: f64) -> f64 {
    if amount > 0.0 {
        rng.gen_range(-amount..=amount)
    } else {
        0.0
    }
}

/// Two views per source, stored as `[2B, 1, side, side]` with the views of
/// source `k` at rows `2k` and `2k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewBatch {
    pub views: Tensor,
    pub labels: Vec<usize>,
    pub sources: Vec<usize>,
}

impl MultiviewBatch {
    pub fn build(
        data: &Dataset,
        labels: &[usize],
        sources: &[usize],
        policy: &AugmentationPolicy,
        seed: u64,
    ) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| Error::InvalidArgument("multiview batch needs at least one source".into()))?;
        let side = data.samples[*first].image.shape()[0];
        let mut views = Vec::with_capacity(2 * sources.len() * side * side);
        let mut view_labels = Vec::with_capacity(2 * sources.len());
        let mut view_sources = Vec::with_capacity(2 * sources.len());
        for (k, &s) in sources.iter().enumerate() {
            let img = &data
                .samples
                .get(s)
                .ok_or_else(|| Error::InvalidArgument(format!("source index {s} out of range")))?
                .image;
            let mut r = rng(mix(seed, k as u64));
            for _ in 0..2 {
                views.extend_from_slice(augment(policy, img, &mut r)?.data());
                view_labels.push(labels[s]);
                view_sources.push(s);
            }
        }
        Ok(Self {
            views: Tensor::new(vec![2 * sources.len(), 1, side, side], views)?,
            labels: view_labels,
            sources: view_sources,
        })
    }
}

fn check_unit_rows(z: &Tensor, labels: &[usize], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if z.shape().len() != 2 || z.batch() != labels.len() || z.batch() < 2 {
        return Err(Error::shape("supcon embeddings", [labels.len(), z.row_len()], z.shape()));
    }
    for i in 0..z.batch() {
        let n = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("embedding {i} has norm {n}, expected unit norm")));
        }
    }
    Ok(())
}

/// Mean over anchors of the supervised contrastive loss on `[N, d]` unit
/// rows, with the gradient with respect to the rows.
pub fn supcon_loss_and_grad(z: &Tensor, labels: &[usize], tau: f64) -> Result<(f64, Tensor)> {
    check_unit_rows(z, labels, tau)?;
    let n = z.batch();
    let d = z.row_len();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = crate::numerics::dot(z.row(i), z.row(j)) / tau;
        }
    }
    // coef[i][j] = softmax_ij - [j in P(i)] / |P(i)|, zero on the diagonal
    let mut coef = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            return Err(Error::InvalidArgument(format!("anchor {i} has no positive in the batch")));
        }
        let row = &sim[i * n..(i + 1) * n];
        let max = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = max + denom.ln();
        let inv_p = 1.0 / positives.len() as f64;
        loss += lse - positives.iter().map(|&p| row[p]).sum::<f64>() * inv_p;
        for j in (0..n).filter(|&j| j != i) {
            coef[i * n + j] = (row[j] - lse).exp();
        }
        for &p in &positives {
            coef[i * n + p] -= inv_p;
        }
    }
    let scale = 1.0 / (n as f64 * tau);
    let mut grad = vec![0.0; n * d];
    for k in 0..n {
        let g = &mut grad[k * d..(k + 1) * d];
        for j in 0..n {
            let c = coef[k * n + j] + coef[j * n + k];
            if c != 0.0 {
                for (gv, zv) in g.iter_mut().zip(z.row(j)) {
                    *gv += scale * c * zv;
                }
            }
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, d], grad)?))
}

pub fn supcon_loss(z: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    Ok(supcon_loss_and_grad(z, labels, tau)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupConConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Draw `B/2` bins and two images from each instead of uniform sources.
    pub balanced_sampler: bool,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 64,
            epochs: 25,
            learning_rate: 1e-3,
            momentum: 0.9,
            balanced_sampler: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Optimizer state after the last step (covers backbone then head).
    pub optimizer: Option<Sgd>,
}

/// Source batches for one epoch: uniform chunks of a shuffled order, or
/// pairs from randomly chosen bins when `balanced` is set.
fn epoch_batches<R: Rng>(labels: &[usize], batch: usize, balanced: bool, r: &mut R) -> Vec<Vec<usize>> {
    let n = labels.len();
    if !balanced {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(r);
        return order.chunks(batch).map(<[usize]>::to_vec).collect();
    }
    let n_bins = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_bins];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let bins: Vec<usize> = (0..n_bins).filter(|&b| !members[b].is_empty()).collect();
    let per_batch = (batch / 2).max(1);
    (0..n.div_ceil(batch))
        .map(|_| {
            let mut out = Vec::with_capacity(batch);
            for &b in bins.choose_multiple(r, per_batch.min(bins.len())) {
                out.extend(members[b].choose_multiple(r, 2));
            }
            out
        })
        .collect()
}

/// Trains backbone and head jointly on `labels` (one per sample of `data`)
/// and returns the backbone; the head is discarded by the caller.
pub fn pretrain(
    backbone: Backbone,
    head: &mut ProjectionHead,
    data: &Dataset,
    labels: &[usize],
    policy: &AugmentationPolicy,
    cfg: &SupConConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if data.is_empty() || labels.len() != data.len() {
        return Err(Error::shape("pretrain labels", data.len(), labels.len()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("supcon batch_size and epochs must be positive".into()));
    }
    policy.validate()?;
    let mut backbone = backbone;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut order_rng = rng(derive_seed(seed, "supcon-order"));
    let view_seed = derive_seed(seed, "supcon-views");
    let mut step = 0u64;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for sources in epoch_batches(labels, cfg.batch_size, cfg.balanced_sampler, &mut order_rng) {
            let batch = MultiviewBatch::build(data, labels, &sources, policy, mix(view_seed, step))?;
            let r = backbone.forward(&batch.views)?;
            let z = head.forward(&r)?;
            let (loss, dz) = supcon_loss_and_grad(&z, &batch.labels, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "supcon loss is {loss} at epoch {epoch}, step {step}"
                )));
            }
            let dr = head.backward(&dz)?;
            backbone.net.backward(&dr)?;
            let mut params: Vec<&mut Param> = backbone
                .net
                .params_mut()
                .into_iter()
                .chain(head.net.params_mut())
                .collect();
            sgd.step(&mut params)?;
            total += loss;
            count += 1;
            step += 1;
        }
        loss_curve.push(total / count as f64);
    }
    backbone.net.clear_caches();
    Ok(PretrainOutcome {
        backbone,
        loss_curve,
        optimizer: Some(sgd),
    })
}

/// Instance discrimination: every source is its own class.
pub fn simclr_mode(
    backbone: Backbone,
    head: &mut ProjectionHead,
    data: &Dataset,
    policy: &AugmentationPolicy,
    cfg: &SupConConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let labels: Vec<usize> = (0..data.len()).collect();
    let cfg = SupConConfig {
        balanced_sampler: false,
        ..cfg.clone()
    };
    pretrain(backbone, head, data, &labels, policy, &cfg, seed)
}

pub fn write_loss_curve(path: &std::path::Path, curve: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in curve.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![v.len(), 2], v.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn hand_case() {
        let z = rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        let l = supcon_loss(&z, &[0, 0, 1, 1], 1.0).unwrap();
        let expected = (std::f64::consts::E + 2.0).ln() - 1.0;
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.55144).abs() < 1e-5);
    }

    #[test]
    fn two_same_label_samples_give_zero() {
        let s = 0.6f64;
        let z = rows(&[[1.0, 0.0], [s, (1.0 - s * s).sqrt()]]);
        for tau in [0.07, 1.0, 3.0] {
            assert_eq!(supcon_loss(&z, &[4, 4], tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn contract_violations() {
        let z = rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(supcon_loss(&z, &[0, 1], 1.0).is_err());
        assert!(supcon_loss(&rows(&[[1.0, 0.0], [0.0, 2.0]]), &[0, 0], 1.0).is_err());
        assert!(supcon_loss(&z, &[0, 0], 0.0).is_err());
        assert!(supcon_loss(&z, &[0, 0, 0], 1.0).is_err());
    }

    #[test]
    fn augment_shape_and_determinism() {
        let img = Tensor::new(vec![8, 8], (0..64).map(|v| v as f64 / 64.0).collect()).unwrap();
        let p = AugmentationPolicy::default();
        let a = augment(&p, &img, &mut rng(3)).unwrap();
        assert_eq!(a.shape(), img.shape());
        assert!(a.is_finite());
        assert_eq!(a, augment(&p, &img, &mut rng(3)).unwrap());
        assert_eq!(augment(&AugmentationPolicy::identity(Normalization::default()), &img, &mut rng(1)).unwrap(), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        assert_ne!(hflip(&img), img);
        assert_eq!(hflip(&hflip(&img)), img);
        let p = AugmentationPolicy {
            flip_prob: 1.0,
            ..AugmentationPolicy::identity(Normalization::default())
        };
        let once = augment(&p, &img, &mut rng(0)).unwrap();
        assert_eq!(once, hflip(&img));
        assert_eq!(augment(&p, &once, &mut rng(0)).unwrap(), img);
    }
}
