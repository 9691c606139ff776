//! Helpers shared by unit tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{LayerSpec, Network, NetworkSpec};
use crate::ranking::{
    multitask_loss, pairwise_hinge, ranking_loss_efficient, ranking_loss_naive, regression_loss, ComparabilityLabels,
    MiniBatch, RankingConfig, RegressionTarget,
};
use crate::tensor::Tensor;

const H: f64 = 1e-6;

/// Relative error used by finite-difference checks. The denominator is
/// floored at 1e-3 so that near-zero gradients are compared absolutely at
/// the noise level of a 1e-6 central difference.
pub fn fd_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Tensor with entries uniform in [-1, 1).
pub fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Random group structure: members fall into up to `max_groups` groups (or
/// none) with φ a random permutation, so index and rank order differ.
pub fn random_labels<R: Rng>(rng: &mut R, m: usize, max_groups: usize) -> ComparabilityLabels {
    let groups: Vec<Option<usize>> = (0..m)
        .map(|_| {
            let g = rng.random_range(0..=max_groups);
            (g < max_groups).then_some(g)
        })
        .collect();
    let mut phi: Vec<f64> = (0..m).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        phi.swap(i, j);
    }
    ComparabilityLabels::from_groups(&groups, &phi).expect("valid groups")
}

/// Worst relative error of central differences over `theta`.
fn fd_worst(theta: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut t = theta.to_vec();
    for k in 0..theta.len() {
        t[k] = theta[k] + H;
        let up = f(&t);
        t[k] = theta[k] - H;
        let down = f(&t);
        t[k] = theta[k];
        worst = worst.max(fd_relative_error(analytic[k], (up - down) / (2.0 * H)));
    }
    worst
}

/// `Σ r·regression + Σ s·ranking`, evaluated without recording.
fn head_objective(net: &Network, x: &Tensor, r: &Tensor, s: &[f64]) -> f64 {
    let out = net.predict(x).expect("valid input");
    let a: f64 = out.regression.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    let b: f64 = out.ranking.iter().zip(s).map(|(a, b)| a * b).sum();
    a + b
}

/// Analytic vs central-difference gradients of a random linear functional
/// of both heads, over parameters and input, on a random instance.
pub fn network_gradient_check(spec: NetworkSpec, batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(spec, seed).expect("valid spec");
    // Non-zero biases so every code path carries signal.
    for p in net.params_mut().iter_mut() {
        if p.name.ends_with("bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let x = random_tensor(&mut rng, shape.clone());
    let mut rshape = vec![batch];
    rshape.extend_from_slice(net.output_shape());
    let r = random_tensor(&mut rng, rshape);
    let s: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();

    net.forward(&x).expect("valid input");
    let gin = net.backward_with_input_grad(Some(&r), Some(&s)).expect("recorded forward");
    let analytic = net.params().flat_grad();
    let theta = net.params().flat_values();
    let mut probe = net.clone();
    let params = fd_worst(&theta, &analytic, |t| {
        probe.params_mut().set_flat_values(t).expect("same length");
        head_objective(&probe, &x, &r, &s)
    });
    let input = fd_worst(x.data(), gin.data(), |xs| {
        let xp = Tensor::new(shape.clone(), xs.to_vec()).expect("same shape");
        head_objective(&net, &xp, &r, &s)
    });
    params.max(input)
}

/// One small network per layer type, each exercising that layer's backward.
pub fn layer_cases() -> Vec<(&'static str, NetworkSpec)> {
    let conv = |i, o, k| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
    };
    let dense = |inputs, outputs| LayerSpec::Dense { inputs, outputs };
    vec![
        ("conv3", NetworkSpec::new(vec![2, 5, 6], vec![conv(2, 3, 3)])),
        ("conv1", NetworkSpec::new(vec![2, 4, 4], vec![conv(2, 2, 1)])),
        ("conv5", NetworkSpec::new(vec![1, 4, 5], vec![conv(1, 2, 5)])),
        ("relu", NetworkSpec::new(vec![3, 4, 4], vec![conv(3, 2, 3), LayerSpec::Relu])),
        (
            "maxpool",
            NetworkSpec::new(vec![2, 6, 6], vec![LayerSpec::MaxPool2d { size: 2 }, conv(2, 1, 3)]),
        ),
        ("dense", NetworkSpec::new(vec![7], vec![dense(7, 3)])),
        ("sumpool", NetworkSpec::new(vec![1, 4, 4], vec![conv(1, 2, 3), LayerSpec::GlobalSumPool])),
        (
            "meanpool",
            NetworkSpec::new(vec![1, 4, 4], vec![conv(1, 2, 3), LayerSpec::GlobalMeanPool, dense(1, 2)]),
        ),
    ]
}

/// Mean squared error gradient against central differences.
pub fn regression_gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=16);
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, g) = regression_loss(&p, &y).expect("same length");
    fd_worst(&p, &g, |q| regression_loss(q, &y).expect("same length").0)
}

/// Efficient ranking gradient against central differences of the naive
/// pairwise loss.
pub fn ranking_gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=16);
    let labels = random_labels(&mut rng, m, 3);
    let eps = [0.0, 0.1, 1.0][rng.random_range(0..3)];
    let scores: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let out = ranking_loss_efficient(&scores, &labels, eps).expect("valid labels");
    fd_worst(&scores, &out.grad, |s| ranking_loss_naive(s, &labels, eps).expect("valid labels").0)
}

/// Small fully-convolutional trunk used by the composite-loss checks.
pub fn small_density_net(seed: u64) -> Network {
    Network::new(
        NetworkSpec::parse("1x6x6|conv3x3:1->3|relu|maxpool2|conv3x3:3->1").expect("valid spec"),
        seed,
    )
    .expect("valid network")
}

/// The multi-task loss written out directly from its definition.
pub fn multitask_objective(net: &Network, batch: &MiniBatch, cfg: &RankingConfig) -> f64 {
    let out = net.predict(&batch.images).expect("valid batch");
    let item = out.regression.item_len();
    let labeled: Vec<usize> = (0..batch.len()).filter(|&i| batch.targets[i].is_some()).collect();
    let n = labeled.len() as f64;
    let mut reg = 0.0;
    for &i in &labeled {
        match batch.targets[i].as_ref().expect("labeled") {
            RegressionTarget::Scalar(y) => reg += (out.ranking[i] - y).powi(2) / n,
            RegressionTarget::Map(y) => {
                for k in 0..item {
                    reg += (out.regression.item(i)[k] - y[k]).powi(2) / n;
                }
            }
        }
    }
    let mut rank = 0.0;
    for (i, j) in batch.labels.positive_pairs() {
        rank += pairwise_hinge(out.ranking[i], out.ranking[j], cfg.margin);
    }
    reg + cfg.tradeoff * rank
}

/// Parameter gradients of the multi-task loss (map, scalar and unlabeled
/// members, two groups) against central differences of its definition.
pub fn multitask_gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 8;
    let images = random_tensor(&mut rng, vec![m, 1, 6, 6]);
    let labels = random_labels(&mut rng, m, 2);
    let targets: Vec<Option<RegressionTarget>> = (0..m)
        .map(|i| match rng.random_range(0..3) {
            0 => Some(RegressionTarget::Map((0..9).map(|_| rng.random_range(0.0..1.0)).collect())),
            1 => Some(RegressionTarget::Scalar(rng.random_range(-1.0..1.0))),
            _ if labels.is_ranked(i) => None,
            _ => Some(RegressionTarget::Scalar(rng.random_range(-1.0..1.0))),
        })
        .collect();
    let batch = MiniBatch::new(images, targets, labels).expect("valid batch");
    let cfg = RankingConfig {
        margin: [0.0, 0.1, 1.0][rng.random_range(0..3)],
        tradeoff: rng.random_range(0.1..2.0),
    };
    let mut net = small_density_net(seed);
    multitask_loss(&batch, &mut net, &cfg).expect("valid batch");
    let analytic = net.params().flat_grad();
    let theta = net.params().flat_values();
    let mut probe = net.clone();
    fd_worst(&theta, &analytic, |t| {
        probe.params_mut().set_flat_values(t).expect("same length");
        multitask_objective(&probe, &batch, &cfg)
    })
}
