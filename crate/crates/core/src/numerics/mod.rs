//! Tensor and layer core with hand-written backward passes.

mod layers;
mod network;
mod optim;
mod tensor;

pub use layers::{sigmoid, Conv2d, Dense, Flatten, Layer, LayerSpec, Param, Relu, Reshape, Sigmoid, Upsample};
pub use network::Network;
pub use optim::Sgd;
pub use tensor::{cosine_similarity, dot, Tensor};

/// Numerically stable `log(sum(exp(values)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of a slice with max subtraction.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
