//! Concrete networks: the convolutional autoencoder, the encoder backbone,
//! the projection head and the linear classification heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LayerSpec, Network, Tensor};

pub const SUPPORTED_SIDES: [usize; 2] = [32, 64];

fn check_side(image_side: usize) -> Result<usize> {
    if !SUPPORTED_SIDES.contains(&image_side) {
        return Err(Error::InvalidArgument(format!(
            "unsupported image side {image_side}; expected one of {SUPPORTED_SIDES:?}"
        )));
    }
    // number of stride-2 stages to reach an 8x8 (autoencoder) map
    Ok((image_side / 8).trailing_zeros() as usize)
}

fn conv(cin: usize, cout: usize, stride: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride,
        padding: 1,
        bias,
    }
}

fn image_batch(image: &Tensor, side: usize) -> Result<Tensor> {
    match image.shape() {
        [h, w] if *h == side && *w == side => image.clone().reshape(&[1, 1, side, side]),
        [1, h, w] if *h == side && *w == side => image.clone().reshape(&[1, 1, side, side]),
        [_, 1, h, w] if *h == side && *w == side => Ok(image.clone()),
        other => Err(Error::shape("model input", [side, side], other)),
    }
}

/// Encoder/decoder pair; the decoder's parameterized layers are the ones
/// whose gradients are tracked for anomaly scoring.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Network,
    pub decoder: Network,
    pub image_side: usize,
    pub latent_dim: usize,
}

pub fn autoencoder_specs(image_side: usize, latent_dim: usize) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>)> {
    let stages = check_side(image_side)?;
    if latent_dim < 4 {
        return Err(Error::InvalidArgument(format!(
            "latent_dim must be at least 4, got {latent_dim}"
        )));
    }
    let channels: Vec<usize> = (0..stages).map(|i| if i == 0 { 8 } else { 16 }).collect();

    let mut enc = Vec::new();
    let mut cin = 1;
    for &c in &channels {
        enc.push(conv(cin, c, 2, true));
        enc.push(LayerSpec::Relu);
        cin = c;
    }
    let top = *channels.last().expect("at least one stage");
    enc.push(LayerSpec::Flatten);
    enc.push(LayerSpec::Dense {
        inputs: top * 64,
        outputs: latent_dim,
        bias: true,
    });

    let mut dec = vec![
        LayerSpec::Dense {
            inputs: latent_dim,
            outputs: top * 64,
            bias: true,
        },
        LayerSpec::Relu,
        LayerSpec::Reshape {
            shape: vec![top, 8, 8],
        },
    ];
    let mut cin = top;
    for i in (0..stages).rev() {
        let cout = if i == 0 { 1 } else { channels[i - 1] };
        dec.push(LayerSpec::Upsample { factor: 2 });
        dec.push(conv(cin, cout, 1, true));
        if i > 0 {
            dec.push(LayerSpec::Relu);
        }
        cin = cout;
    }
    dec.push(LayerSpec::Sigmoid);
    Ok((enc, dec))
}

/// Seeded autoencoder for `image_side` in {32, 64}.
pub fn build_autoencoder(image_side: usize, latent_dim: usize, seed: u64) -> Result<Autoencoder> {
    let (enc, dec) = autoencoder_specs(image_side, latent_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Autoencoder {
        encoder: Network::from_specs(&enc, &mut rng)?,
        decoder: Network::from_specs(&dec, &mut rng)?,
        image_side,
        latent_dim,
    })
}

impl Autoencoder {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let x = image_batch(x, self.image_side)?;
        let code = self.encoder.forward(&x)?;
        self.decoder.forward(&code)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let x = image_batch(x, self.image_side)?;
        self.decoder.infer(&self.encoder.infer(&x)?)
    }

    /// Back-propagates a reconstruction gradient through decoder then encoder.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.decoder.backward(grad)?;
        self.encoder.backward(&g)
    }

    /// Indices of parameterized decoder layers.
    pub fn decoder_param_layers(&self) -> Vec<usize> {
        self.decoder
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_params();
        v.extend(self.decoder.flat_params());
        v
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.encoder.param_count();
        if flat.len() < n {
            return Err(Error::shape("autoencoder params", n + self.decoder.param_count(), flat.len()));
        }
        self.encoder.load_flat_params(&flat[..n])?;
        self.decoder.load_flat_params(&flat[n..])
    }

    pub fn checksum(&self) -> u64 {
        self.encoder.checksum() ^ self.decoder.checksum().rotate_left(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub embedding_dim: usize,
    pub bias: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            embedding_dim: 64,
            bias: true,
        }
    }
}

/// Convolutional encoder mapping a `[1, side, side]` image to a flat
/// non-negative representation of `embedding_dim` values.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub net: Network,
    pub image_side: usize,
    pub embedding_dim: usize,
}

pub fn backbone_specs(cfg: &BackboneConfig) -> Result<Vec<LayerSpec>> {
    let stages = check_side(cfg.image_side)? + 1;
    if cfg.embedding_dim == 0 {
        return Err(Error::InvalidArgument("embedding_dim must be positive".into()));
    }
    let mut specs = Vec::new();
    let mut cin = 1;
    for i in 0..stages {
        let c = if i == 0 { 8 } else { 16 };
        specs.push(conv(cin, c, 2, cfg.bias));
        specs.push(LayerSpec::Relu);
        cin = c;
    }
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::Dense {
        inputs: cin * 16,
        outputs: cfg.embedding_dim,
        bias: cfg.bias,
    });
    specs.push(LayerSpec::Relu);
    Ok(specs)
}

pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Backbone> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Backbone {
        net: Network::from_specs(&backbone_specs(cfg)?, &mut rng)?,
        image_side: cfg.image_side,
        embedding_dim: cfg.embedding_dim,
    })
}

impl Backbone {
    /// Representation of a single image as a flat vector.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let x = image_batch(image, self.image_side)?;
        if x.batch() != 1 {
            return Err(Error::shape("embed", "a single image", x.shape()));
        }
        let out = self.net.infer(&x)?;
        Ok(Tensor::vector(out.into_data()))
    }

    /// `[B, 1, side, side]` to `[B, embedding_dim]`, without caching.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.net.infer(&image_batch(images, self.image_side)?)
    }

    pub fn forward(&mut self, images: &Tensor) -> Result<Tensor> {
        let x = image_batch(images, self.image_side)?;
        self.net.forward(&x)
    }

    pub fn checksum(&self) -> u64 {
        self.net.checksum()
    }
}

/// MLP with one hidden layer whose output is L2-normalized.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub net: Network,
    pub output_dim: usize,
    norms: Option<Vec<f64>>,
    normalized: Option<Tensor>,
}

pub fn build_projection_head(
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    bias: bool,
    seed: u64,
) -> Result<ProjectionHead> {
    let specs = [
        LayerSpec::Dense {
            inputs: input_dim,
            outputs: hidden_dim,
            bias,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: hidden_dim,
            outputs: output_dim,
            bias,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ProjectionHead {
        net: Network::from_specs(&specs, &mut rng)?,
        output_dim,
        norms: None,
        normalized: None,
    })
}

/// Row-wise L2 normalization of a `[B, d]` tensor; returns the unit rows and
/// the pre-normalization norms. A zero row is an error.
pub fn l2_normalize_rows(u: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let d = u.row_len();
    let mut out = u.data().to_vec();
    let mut norms = Vec::with_capacity(u.batch());
    for (i, row) in out.chunks_mut(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(Error::Numerical(format!(
                "projection row {i} has zero norm before normalization"
            )));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((Tensor::new(u.shape().to_vec(), out)?, norms))
}

/// Gradient through `z = u / |u|`: `du = (dz - z (z . dz)) / |u|`.
pub fn l2_normalize_backward(z: &Tensor, norms: &[f64], grad: &Tensor) -> Result<Tensor> {
    if z.shape() != grad.shape() {
        return Err(Error::shape("l2 normalize backward", z.shape(), grad.shape()));
    }
    let d = z.row_len();
    let mut out = vec![0.0; z.len()];
    for (i, n) in norms.iter().enumerate() {
        let zr = z.row(i);
        let gr = grad.row(i);
        let proj: f64 = zr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for k in 0..d {
            out[i * d + k] = (gr[k] - zr[k] * proj) / n;
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

impl ProjectionHead {
    /// Unit-norm projection of one representation vector.
    pub fn project(&self, r: &Tensor) -> Result<Tensor> {
        let x = r.clone().reshape(&[1, r.len()])?;
        let (z, _) = l2_normalize_rows(&self.net.infer(&x)?)?;
        Ok(Tensor::vector(z.into_data()))
    }

    pub fn forward(&mut self, r: &Tensor) -> Result<Tensor> {
        let u = self.net.forward(r)?;
        let (z, norms) = l2_normalize_rows(&u)?;
        self.norms = Some(norms);
        self.normalized = Some(z.clone());
        Ok(z)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (z, norms) = match (&self.normalized, &self.norms) {
            (Some(z), Some(n)) => (z, n),
            _ => return Err(Error::NoForwardCache("projection head".into())),
        };
        let du = l2_normalize_backward(z, norms, grad)?;
        self.net.backward(&du)
    }
}

/// A single dense layer mapping representations to `outputs` logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub net: Network,
}

pub fn build_classifier_head(input_dim: usize, outputs: usize, seed: u64) -> Result<ClassifierHead> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = [LayerSpec::Dense {
        inputs: input_dim,
        outputs,
        bias: true,
    }];
    Ok(ClassifierHead {
        net: Network::from_specs(&specs, &mut rng)?,
    })
}

impl ClassifierHead {
    pub fn outputs(&self) -> usize {
        match self.net.specs().first() {
            Some(LayerSpec::Dense { outputs, .. }) => *outputs,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Layer;

    #[test]
    fn autoencoder_is_seeded() {
        let a = build_autoencoder(32, 16, 7).unwrap();
        let b = build_autoencoder(32, 16, 7).unwrap();
        let bits = |m: &Autoencoder| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = build_autoencoder(32, 16, 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn autoencoder_preserves_shape() {
        for side in SUPPORTED_SIDES {
            let mut ae = build_autoencoder(side, 16, 7).unwrap();
            let y = ae.forward(&Tensor::full(&[side, side], 0.5)).unwrap();
            assert_eq!(y.shape(), &[1, 1, side, side]);
            assert!(ae.decoder_param_layers().len() >= 2);
        }
    }

    #[test]
    fn autoencoder_rejects_bad_config() {
        assert!(build_autoencoder(48, 16, 1).is_err());
        assert!(build_autoencoder(32, 3, 1).is_err());
    }

    #[test]
    fn embed_shape_and_determinism() {
        let bb = build_backbone(&BackboneConfig::default(), 3).unwrap();
        let img = Tensor::new(vec![32, 32], (0..1024).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let a = bb.embed(&img).unwrap();
        assert_eq!(a.shape(), &[64]);
        assert_eq!(a, bb.embed(&img).unwrap());
        assert!(bb.embed(&Tensor::zeros(&[16, 16])).is_err());
    }

    #[test]
    fn zero_weight_bias_free_backbone_gives_zero() {
        let cfg = BackboneConfig {
            bias: false,
            ..Default::default()
        };
        let mut bb = build_backbone(&cfg, 3).unwrap();
        for p in bb.net.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let r = bb.embed(&Tensor::full(&[32, 32], 0.7)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_is_unit_norm_and_scale_free() {
        let head = build_projection_head(8, 8, 4, false, 11).unwrap();
        let r = Tensor::vector((0..8).map(|i| 0.3 * i as f64 - 1.0).collect());
        let z = head.project(&r).unwrap();
        assert_eq!(z.len(), 4);
        assert!((z.norm() - 1.0).abs() < 1e-9);
        let r2 = Tensor::vector(r.data().iter().map(|v| 2.0 * v).collect());
        let z2 = head.project(&r2).unwrap();
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_projection_errors() {
        let mut head = build_projection_head(4, 4, 2, false, 1).unwrap();
        for p in head.net.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        assert!(head.project(&Tensor::vector(vec![1.0; 4])).is_err());
    }

    #[test]
    fn classifier_head_is_single_dense() {
        let h = build_classifier_head(64, 5, 0).unwrap();
        assert_eq!(h.net.len(), 1);
        assert!(matches!(h.net.layers()[0], Layer::Dense(_)));
        assert_eq!(h.outputs(), 5);
    }
}
