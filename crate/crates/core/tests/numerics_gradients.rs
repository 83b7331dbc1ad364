mod common;

use common::{network_gradient_error, random_tensor, rng};
use proptest::prelude::*;
use sevcon::numerics::{LayerSpec, Network, Tensor};

const TOL: f64 = 1e-4;

fn check(specs: &[LayerSpec], input_shape: &[usize], seed: u64) {
    let mut r = rng(seed);
    let net = Network::from_specs(specs, &mut r).unwrap();
    // shift away from relu kinks so the finite-difference step never straddles zero
    let mut x = random_tensor(input_shape, &mut r);
    for v in x.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    let (pe, ie) = network_gradient_error(&net, &x, seed ^ 0x5eed);
    assert!(pe < TOL, "{specs:?}: parameter gradient rel error {pe}");
    assert!(ie < TOL, "{specs:?}: input gradient rel error {ie}");
}

#[test]
fn dense_with_bias() {
    check(&[LayerSpec::Dense { inputs: 5, outputs: 3, bias: true }], &[4, 5], 1);
}

#[test]
fn conv2d_same_padding() {
    check(
        &[LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1, bias: true }],
        &[2, 2, 5, 5],
        2,
    );
}

#[test]
fn strided_conv2d() {
    check(
        &[LayerSpec::Conv2d { in_channels: 2, out_channels: 2, kernel: 3, stride: 2, padding: 1, bias: false }],
        &[2, 2, 6, 6],
        3,
    );
}

#[test]
fn upsample_then_conv() {
    check(
        &[
            LayerSpec::Upsample { factor: 2 },
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1, bias: true },
        ],
        &[1, 1, 3, 3],
        4,
    );
}

#[test]
fn activations_and_reshapes() {
    check(
        &[
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 8, outputs: 6, bias: true },
            LayerSpec::Sigmoid,
            LayerSpec::Reshape { shape: vec![1, 2, 3] },
            LayerSpec::Relu,
            LayerSpec::Flatten,
        ],
        &[3, 2, 2, 2],
        5,
    );
}

#[test]
fn random_two_layer_net() {
    check(
        &[
            LayerSpec::Dense { inputs: 6, outputs: 7, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 7, outputs: 3, bias: true },
        ],
        &[5, 6],
        6,
    );
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut r = rng(9);
    let specs = [
        LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 2, padding: 1, bias: true },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 64, outputs: 5, bias: true },
    ];
    let mut net = Network::from_specs(&specs, &mut r).unwrap();
    let x = random_tensor(&[3, 1, 8, 8], &mut r);
    let a = net.forward(&x).unwrap();
    let b = net.forward(&x).unwrap();
    let c = net.infer(&x).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_on_random_shapes(
        c_in in 1usize..3,
        c_out in 1usize..3,
        kernel in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        side in 3usize..7,
        batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        let padding = kernel / 2;
        check(
            &[LayerSpec::Conv2d { in_channels: c_in, out_channels: c_out, kernel, stride, padding, bias: true }],
            &[batch, c_in, side, side],
            seed,
        );
    }

    #[test]
    fn dense_relu_gradients_on_random_shapes(
        n_in in 1usize..6,
        hidden in 1usize..6,
        n_out in 1usize..4,
        batch in 1usize..4,
        seed in any::<u64>(),
    ) {
        check(
            &[
                LayerSpec::Dense { inputs: n_in, outputs: hidden, bias: true },
                LayerSpec::Sigmoid,
                LayerSpec::Dense { inputs: hidden, outputs: n_out, bias: false },
            ],
            &[batch, n_in],
            seed,
        );
    }
}
