//! Compares back-propagated gradients of a small conv net against central
//! finite differences of a scalar loss.
//!
//! ```bash
//! cargo run -p sevcon --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sevcon::numerics::{LayerSpec, Network, Tensor};

/// Scalar loss `sum(w * f(x))` for a fixed random weighting `w`.
fn loss(net: &Network, x: &Tensor, w: &[f64]) -> sevcon::Result<f64> {
    Ok(net.infer(x)?.data().iter().zip(w).map(|(a, b)| a * b).sum())
}

fn main() -> sevcon::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let specs = [
        LayerSpec::Conv2d { in_channels: 1, out_channels: 3, kernel: 3, stride: 2, padding: 1, bias: true },
        LayerSpec::Sigmoid,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 3 * 4 * 4, outputs: 5, bias: true },
    ];
    let mut net = Network::from_specs(&specs, &mut rng)?;
    let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let out = net.forward(&x)?;
    let w: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    net.backward(&Tensor::new(out.shape().to_vec(), w.clone())?)?;
    let analytic: Vec<f64> = net.params().iter().flat_map(|p| p.grad.data().to_vec()).collect();

    let theta = net.flat_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        probe.load_flat_params(&t)?;
        let up = loss(&probe, &x, &w)?;
        t[i] -= 2.0 * h;
        probe.load_flat_params(&t)?;
        let down = loss(&probe, &x, &w)?;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("{} parameters, worst relative error {worst:.2e}", theta.len());
    Ok(())
}
