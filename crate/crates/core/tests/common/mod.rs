//! Test-only oracles that are independent of the code paths they check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sevcon::numerics::{Network, Tensor};

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Norm-wise relative error `|a - b| / max(|a| + |b|, 1e-12)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Central finite difference of a scalar function of a flat vector.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Worst relative error between analytic and numerical gradients of the
/// probe loss `sum(net(x) * weights)` over parameters and input.
pub fn network_gradient_error(net: &Network, x: &Tensor, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let mut net = net.clone();
    let y = net.forward(x).unwrap();
    let probe = random_tensor(y.shape(), &mut r);
    let gx = net.backward(&probe).unwrap();
    let analytic_params: Vec<f64> = net
        .params()
        .iter()
        .flat_map(|p| p.grad.data().iter().copied())
        .collect();

    let loss = |n: &Network, input: &Tensor| -> f64 {
        let out = n.infer(input).unwrap();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let base = net.flat_params();
    let mut scratch = net.clone();
    let numeric_params = central_diff(&base, |theta| {
        scratch.load_flat_params(theta).unwrap();
        loss(&scratch, x)
    });
    let numeric_input = central_diff(x.data(), |v| {
        let t = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        loss(&net, &t)
    });
    let param_err = if base.is_empty() {
        0.0
    } else {
        rel_error(&analytic_params, &numeric_params)
    };
    (param_err, rel_error(gx.data(), &numeric_input))
}

/// A pipeline small enough to run end to end in a few seconds.
pub const TINY_CONFIG: &str = r#"
[data]
n_healthy = 64
n_healthy_holdout = 32
n_unlabeled = 120
n_train = 60
n_test_per_biomarker = 20
n_multilabel_test = 40

[gradcon]
epochs = 2

[labels]
n_bins = 10
bin_sweep = [5, 10, 20]

[pretrain]
epochs = 1
batch_size = 32

[probe]
epochs = 5

[baselines.classifier]
epochs = 2
"#;

pub fn tiny_config() -> sevcon::cli::ExperimentConfig {
    sevcon::cli::ExperimentConfig::from_toml(TINY_CONFIG).unwrap()
}
