use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stochastic gradient descent with classical (heavy-ball) momentum:
/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) {
        self.velocity = velocity;
    }

    /// Applies one update using each parameter's stored gradient.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape("sgd step", self.velocity.len(), params.len()));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
                return Err(Error::shape("sgd step", v.shape(), p.value.shape()));
            }
            let (mu, lr) = (self.momentum, self.learning_rate);
            let grad = p.grad.data();
            for ((vel, g), val) in v
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(p.value.data_mut().iter_mut())
            {
                *vel = mu * *vel + g;
                *val -= lr * *vel;
            }
        }
        Ok(())
    }
}
