use rand::Rng;

use super::layers::{Layer, LayerSpec, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// An ordered stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Network {
    layers: Vec<Layer>,
}

fn locate(err: Error, index: usize, layer: &Layer) -> Error {
    match err {
        Error::Shape {
            context,
            expected,
            got,
        } => Error::Shape {
            context: format!("layer {index} ({}): {context}", layer.name()),
            expected,
            got,
        },
        Error::NoForwardCache(_) => {
            Error::NoForwardCache(format!("layer {index} ({})", layer.name()))
        }
        other => other,
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn from_specs<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| s.build(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur).map_err(|e| locate(e, i, layer))?;
        }
        Ok(cur)
    }

    /// Forward pass without touching any cache.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.infer(&cur).map_err(|e| locate(e, i, layer))?;
        }
        Ok(cur)
    }

    /// Back-propagates from the output gradient; parameter gradients are
    /// overwritten and the gradient with respect to the input is returned.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut cur = grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            cur = layer.backward(&cur).map_err(|e| locate(e, i, layer))?;
        }
        Ok(cur)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter value, in `params()` order, into one flat vector.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::shape("load_flat_params", expected, flat.len()));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Order-sensitive digest of all parameter bits, for freeze and purity checks.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the IEEE bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.flat_params() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn clear_caches(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::{Dense, Relu};

    #[test]
    fn empty_network_is_identity() {
        let mut net = Network::default();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
        assert_eq!(net.backward(&x).unwrap(), x);
    }

    #[test]
    fn single_relu() {
        let mut net = Network::new(vec![Layer::Relu(Relu::default())]);
        let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[0.0, 2.0]);
        let g = net.backward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn dense_affine_and_grads() {
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        let mut net = Network::new(vec![Layer::Dense(Dense::from_params(w.clone(), Some(b)).unwrap())]);
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[7.0]);

        let mut plain = Network::new(vec![Layer::Dense(Dense::from_params(w, None).unwrap())]);
        plain.forward(&x).unwrap();
        let gx = plain.backward(&Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(gx.data(), &[2.0]);
        assert_eq!(plain.params()[0].grad.data(), &[3.0]);
    }

    #[test]
    fn shape_error_names_layer() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let mut net = Network::new(vec![
            Layer::Relu(Relu::default()),
            Layer::Dense(Dense::from_params(w, None).unwrap()),
        ]);
        let err = net.forward(&Tensor::zeros(&[1, 3])).unwrap_err().to_string();
        assert!(err.contains("layer 1 (dense)"), "{err}");
    }

    #[test]
    fn backward_before_forward_names_layer() {
        let mut net = Network::new(vec![Layer::Relu(Relu::default())]);
        let err = net.backward(&Tensor::zeros(&[1, 1])).unwrap_err();
        assert!(err.to_string().contains("layer 0 (relu)"));
    }
}
