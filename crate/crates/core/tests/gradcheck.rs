//! Finite-difference gradient suite: every layer kind, the residual block,
//! both loss functions and the SSIM objective are checked against central
//! differences over randomized shapes.

use ressfl_core::layers::{
    Block, Conv2d, ConvTranspose2d, Dense, Flatten, Layer, MaxPool2x2, Network, Relu, Sigmoid,
};
use ressfl_core::loss::{mse_loss, softmax_cross_entropy};
use ressfl_core::metrics::{ssim, ssim_with_grad};
use ressfl_core::rng::substream;
use ressfl_core::tensor::Tensor;
use ressfl_core::testing::{
    gradcheck_network, gradcheck_scalar, well_conditioned_input, FD_TOLERANCE,
};

fn check(net: Network, input_shape: Vec<usize>, seed: u64, label: &str) -> usize {
    let input = well_conditioned_input(input_shape, seed);
    let report = gradcheck_network(&net, &input, seed).unwrap();
    assert!(
        report.passes(),
        "{label}: max rel err {} over {} entries (tolerance {FD_TOLERANCE})",
        report.max_rel_err,
        report.checked
    );
    report.checked
}

#[test]
fn conv2d_gradients_across_hyperparameters() {
    let mut cases = 0;
    for (seed, (cin, cout, k, s, p, hw)) in [
        (1, 1, 3, 1, 0, 5usize),
        (1, 2, 1, 1, 0, 4),
        (2, 1, 2, 1, 1, 4),
        (2, 3, 3, 1, 1, 6),
        (1, 2, 3, 2, 1, 7),
        (3, 2, 2, 2, 0, 6),
        (2, 2, 4, 2, 1, 8),
    ]
    .into_iter()
    .enumerate()
    {
        let conv = Conv2d::kaiming(cin, cout, k, s, p, &mut substream(seed as u64, "gc", 0));
        cases += check(
            Network::from_layers(vec![Layer::Conv2d(conv)]),
            vec![2, cin, hw, hw],
            seed as u64,
            &format!("conv {cin}->{cout} k{k} s{s} p{p}"),
        );
    }
    assert!(cases > 100);
}

#[test]
fn conv_transpose_gradients_across_hyperparameters() {
    for (seed, (cin, cout, k, s, p, hw)) in [
        (10, 1, 1, 2, 1, 0, 4usize),
        (11, 2, 1, 3, 1, 1, 4),
        (12, 1, 2, 4, 2, 1, 4),
        (13, 3, 2, 2, 2, 0, 3),
        (14, 2, 2, 3, 2, 1, 5),
    ]
    .map(|(a, b, c, d, e, f, g)| (a, (b, c, d, e, f, g)))
    {
        let t = ConvTranspose2d::kaiming(cin, cout, k, s, p, &mut substream(seed, "gc", 1));
        check(
            Network::from_layers(vec![Layer::ConvTranspose2d(t)]),
            vec![2, cin, hw, hw],
            seed,
            &format!("convT {cin}->{cout} k{k} s{s} p{p}"),
        );
    }
}

#[test]
fn dense_relu_sigmoid_pool_flatten_gradients() {
    for seed in [20u64, 21, 22] {
        let dense = Dense::kaiming(6, 4, &mut substream(seed, "gc", 2));
        check(
            Network::from_layers(vec![Layer::Dense(dense)]),
            vec![3, 6],
            seed,
            "dense",
        );
        check(
            Network::from_layers(vec![Layer::Relu(Relu::new())]),
            vec![2, 3, 4, 4],
            seed,
            "relu",
        );
        check(
            Network::from_layers(vec![Layer::Sigmoid(Sigmoid::new())]),
            vec![2, 10],
            seed,
            "sigmoid",
        );
        check(
            Network::from_layers(vec![Layer::MaxPool2x2(MaxPool2x2::new())]),
            vec![2, 2, 6, 6],
            seed,
            "maxpool",
        );
        check(
            Network::from_layers(vec![Layer::Flatten(Flatten::new())]),
            vec![2, 2, 3, 3],
            seed,
            "flatten",
        );
    }
}

#[test]
fn residual_block_gradients() {
    for seed in [30u64, 31] {
        let mut rng = substream(seed, "gc", 3);
        let body = vec![
            Layer::Conv2d(Conv2d::kaiming(2, 2, 3, 1, 1, &mut rng)),
            Layer::Relu(Relu::new()),
            Layer::Conv2d(Conv2d::kaiming(2, 2, 3, 1, 1, &mut rng)),
        ];
        let net = Network::new(vec![
            Block::Residual(body),
            Block::Single(Layer::Relu(Relu::new())),
        ]);
        check(net, vec![2, 2, 5, 5], seed, "residual pair");
    }
}

#[test]
fn composite_stack_gradients() {
    // conv -> relu -> pool -> conv -> relu -> flatten -> dense, like the desk
    // classifier but smaller.
    let mut rng = substream(40, "gc", 4);
    let net = Network::from_layers(vec![
        Layer::Conv2d(Conv2d::kaiming(1, 2, 3, 1, 1, &mut rng)),
        Layer::Relu(Relu::new()),
        Layer::MaxPool2x2(MaxPool2x2::new()),
        Layer::Conv2d(Conv2d::kaiming(2, 3, 3, 1, 1, &mut rng)),
        Layer::Relu(Relu::new()),
        Layer::Flatten(Flatten::new()),
        Layer::Dense(Dense::kaiming(3 * 4 * 4, 3, &mut rng)),
    ]);
    check(net, vec![2, 1, 8, 8], 40, "composite stack");
}

#[test]
fn softmax_cross_entropy_gradient() {
    let logits = well_conditioned_input(vec![4, 5], 50);
    let labels = vec![0usize, 3, 2, 4];
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let f = |t: &Tensor| softmax_cross_entropy(t, &labels).unwrap().0;
    let report = gradcheck_scalar(&f, &logits, &grad);
    assert!(report.passes(), "ce max rel err {}", report.max_rel_err);
}

#[test]
fn mse_loss_gradient() {
    let pred = well_conditioned_input(vec![3, 8], 51);
    let target = well_conditioned_input(vec![3, 8], 52);
    let (_, grad) = mse_loss(&pred, &target).unwrap();
    let f = |t: &Tensor| mse_loss(t, &target).unwrap().0;
    let report = gradcheck_scalar(&f, &pred, &grad);
    assert!(report.passes(), "mse max rel err {}", report.max_rel_err);
}

#[test]
fn ssim_objective_gradient() {
    for (seed, hw) in [(60u64, 8usize), (61, 9), (62, 5)] {
        // Values in (0,1) like real reconstructions; 5x5 exercises the global
        // window fallback.
        let mut x = well_conditioned_input(vec![2, 1, hw, hw], seed);
        x.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v);
        let mut y = well_conditioned_input(vec![2, 1, hw, hw], seed + 100);
        y.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v);
        let (_, grad) = ssim_with_grad(&x, &y).unwrap();
        let f = |t: &Tensor| ssim(t, &y).unwrap();
        let report = gradcheck_scalar(&f, &x, &grad);
        assert!(
            report.passes(),
            "ssim hw={hw} max rel err {}",
            report.max_rel_err
        );
    }
}
