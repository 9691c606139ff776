use super::*;
use crate::nn::{LayerSpec, NetworkSpec};
use crate::testutil::{
    fd_relative_error, multitask_gradient_check, multitask_objective, random_labels, random_tensor,
    ranking_gradient_check,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn hinge_examples() {
    assert_eq!(pairwise_hinge(2.0, 1.0, 0.0), 1.0);
    assert_eq!(pairwise_hinge(1.0, 2.0, 0.0), 0.0);
    assert_eq!(pairwise_hinge(1.0, 1.0, 0.5), 0.5);
}

#[test]
fn no_comparable_pairs_gives_zero() {
    let labels = ComparabilityLabels::zeros(4);
    let r = ranking_loss_efficient(&[3.0, -1.0, 2.0, 0.5], &labels, 0.3).unwrap();
    assert_eq!(r.loss, 0.0);
    assert_eq!(r.grad, vec![0.0; 4]);
    assert_eq!(r.active_pairs, 0);
}

#[test]
fn single_violated_pair() {
    let mut labels = ComparabilityLabels::zeros(2);
    labels.set_pair(0, 1, 1);
    let r = ranking_loss_efficient(&[2.0, 1.0], &labels, 0.0).unwrap();
    assert_eq!(r.loss, 1.0);
    assert_eq!(r.grad, vec![1.0, -1.0]);
    assert_eq!(r.coefficients.get(0, 1), 1);
    assert_eq!(r.coefficients.get(1, 0), -1);
    assert_eq!(r.coefficients.get(0, 0), 0);
    let (loss, grad, passes) = ranking_loss_naive(&[2.0, 1.0], &labels, 0.0).unwrap();
    assert_eq!((loss, grad, passes), (1.0, vec![1.0, -1.0], 2));
}

#[test]
fn three_groups_of_four_match_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let groups: Vec<Option<usize>> = (0..12).map(|i| Some(i / 4)).collect();
    let phi: Vec<f64> = (0..12).map(|i| (i % 4) as f64).collect();
    let labels = ComparabilityLabels::from_groups(&groups, &phi).unwrap();
    assert_eq!(labels.comparable_pairs(), 3 * 6);
    for _ in 0..20 {
        let scores: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let eff = ranking_loss_efficient(&scores, &labels, 0.1).unwrap();
        let (loss, grad, _) = ranking_loss_naive(&scores, &labels, 0.1).unwrap();
        assert!(rel_close(eff.loss, loss, 1e-12));
        for (a, b) in eff.grad.iter().zip(&grad) {
            assert!(rel_close(*a, *b, 1e-12));
        }
    }
}

#[test]
fn pass_counts_for_single_group() {
    let n = 8;
    let groups = vec![Some(0); n];
    let phi: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let labels = ComparabilityLabels::from_groups(&groups, &phi).unwrap();
    let scores = vec![0.0; n];
    let eff = ranking_loss_efficient(&scores, &labels, 0.0).unwrap();
    let (_, _, naive) = ranking_loss_naive(&scores, &labels, 0.0).unwrap();
    assert_eq!(eff.forward_passes, 8);
    assert_eq!(naive, 56);
    assert_eq!(naive / eff.forward_passes, n - 1);
}

#[test]
fn rejects_invalid_labels() {
    let bad = ComparabilityLabels::from_matrix(2, vec![0, 1, 1, 0]);
    assert!(matches!(bad, Err(RankingError::InvalidLabels(_))));
    let bad = ComparabilityLabels::from_matrix(2, vec![1, 0, 0, 0]);
    assert!(bad.is_err());
    assert!(ComparabilityLabels::from_groups(&[Some(0), Some(0)], &[1.0, 1.0]).is_err());
    // Unvalidated construction is still caught by the loss.
    let labels = ComparabilityLabels {
        size: 2,
        entries: vec![0, 1, 1, 0],
    };
    assert!(ranking_loss_efficient(&[0.0, 0.0], &labels, 0.0).is_err());
    assert!(ranking_loss_naive(&[0.0, 0.0], &labels, 0.0).is_err());
    assert!(ranking_loss_efficient(&[0.0], &ComparabilityLabels::zeros(2), 0.0).is_err());
}

#[test]
fn groups_only_compare_within_group() {
    let labels = ComparabilityLabels::from_groups(
        &[Some(0), Some(0), Some(1), None],
        &[-1.0, -3.0, -2.0, 0.0],
    )
    .unwrap();
    assert_eq!(labels.get(0, 1), -1);
    assert_eq!(labels.get(1, 0), 1);
    assert_eq!(labels.get(0, 2), 0);
    assert!(!labels.is_ranked(3));
    assert!(!labels.is_ranked(2));
}

#[test]
fn regression_loss_examples() {
    let (l, g) = regression_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
    assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
    let (l, g) = regression_loss(&[2.0], &[0.0]).unwrap();
    assert_eq!((l, g), (4.0, vec![4.0]));
    assert_eq!(regression_loss(&[], &[]), Err(RankingError::Empty));
    assert!(regression_loss(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn regression_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, g) = regression_loss(&p, &y).unwrap();
    let h = 1e-6;
    for k in 0..10 {
        let mut up = p.clone();
        up[k] += h;
        let mut down = p.clone();
        down[k] -= h;
        let num = (regression_loss(&up, &y).unwrap().0 - regression_loss(&down, &y).unwrap().0) / (2.0 * h);
        assert!(fd_relative_error(g[k], num) <= 1e-5);
    }
}

fn small_net(seed: u64) -> Network {
    Network::new(
        NetworkSpec::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 1,
                    kernel: 3,
                },
            ],
        ),
        seed,
    )
    .unwrap()
}

#[test]
fn siamese_network_gradients_equal_single_pass() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 6;
        let images = random_tensor(&mut rng, vec![m, 1, 6, 6]);
        let labels = random_labels(&mut rng, m, 2);
        let mut naive_net = small_net(seed);
        let mut eff_net = naive_net.clone();

        let (naive_loss, passes) = ranking_loss_naive_network(&mut naive_net, &images, &labels, 0.1).unwrap();
        assert_eq!(passes as usize, 2 * labels.comparable_pairs());

        let out = eff_net.forward(&images).unwrap();
        let r = ranking_loss_efficient(&out.ranking, &labels, 0.1).unwrap();
        eff_net.backward(None, Some(&r.grad)).unwrap();
        assert_eq!(eff_net.forward_passes(), m as u64);
        assert!(rel_close(naive_loss, r.loss, 1e-12));
        if labels.comparable_pairs() == 0 {
            continue;
        }
        for (a, b) in naive_net.params().flat_grad().iter().zip(eff_net.params().flat_grad()) {
            assert!(rel_close(*a, b, 1e-12), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn multitask_lambda_zero_equals_regression_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random_tensor(&mut rng, vec![6, 1, 6, 6]);
    let mut labels = ComparabilityLabels::zeros(6);
    labels.set_pair(3, 4, 1);
    labels.set_pair(4, 5, 1);
    labels.set_pair(3, 5, 1);
    let targets = vec![
        Some(RegressionTarget::Scalar(1.0)),
        Some(RegressionTarget::Scalar(-0.5)),
        Some(RegressionTarget::Scalar(2.0)),
        None,
        None,
        None,
    ];
    let batch = MiniBatch::new(images.clone(), targets, labels).unwrap();
    let mut net = small_net(1);
    let mut reference = net.clone();
    let cfg = RankingConfig {
        margin: 0.0,
        tradeoff: 0.0,
    };
    let out = multitask_loss(&batch, &mut net, &cfg).unwrap();

    let pred = reference.forward(&images).unwrap();
    let (loss, g) = regression_loss(&pred.ranking[..3], &[1.0, -0.5, 2.0]).unwrap();
    let mut full = g.clone();
    full.extend([0.0; 3]);
    reference.backward(None, Some(&full)).unwrap();
    assert_eq!(out.total, loss);
    assert_eq!(out.regression, loss);
    assert_eq!(net.params().flat_grad(), reference.params().flat_grad());
}

#[test]
fn multitask_without_labels_is_pure_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = random_tensor(&mut rng, vec![4, 1, 6, 6]);
    let labels = ComparabilityLabels::from_groups(&[Some(0); 4], &[0.0, 1.0, 2.0, 3.0]).unwrap();
    let batch = MiniBatch::new(images.clone(), vec![None; 4], labels.clone()).unwrap();
    let mut net = small_net(2);
    let out = multitask_loss(&batch, &mut net, &RankingConfig { margin: 0.2, tradeoff: 1.0 }).unwrap();
    let scores = small_net(2).predict(&images).unwrap().ranking;
    let r = ranking_loss_efficient(&scores, &labels, 0.2).unwrap();
    assert_eq!(out.total, r.loss);
    assert_eq!(out.regression, 0.0);
}

#[test]
fn multitask_rejects_empty_supervision() {
    let images = Tensor::zeros(vec![2, 1, 6, 6]).unwrap();
    assert!(MiniBatch::new(images.clone(), vec![None, None], ComparabilityLabels::zeros(2)).is_err());
    let batch = MiniBatch {
        images,
        targets: vec![None, None],
        labels: ComparabilityLabels::zeros(2),
    };
    let mut net = small_net(0);
    assert!(multitask_loss(&batch, &mut net, &RankingConfig::default()).is_err());
}

#[test]
fn multitask_gradient_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let images = random_tensor(&mut rng, vec![7, 1, 6, 6]);
        let labels = ComparabilityLabels::from_groups(
            &[None, None, None, Some(0), Some(0), Some(0), Some(0)],
            &[0.0, 0.0, 0.0, 3.0, 1.0, 2.0, 0.0],
        )
        .unwrap();
        let map: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let targets = vec![
            Some(RegressionTarget::Map(map)),
            Some(RegressionTarget::Scalar(rng.random_range(-1.0..1.0))),
            Some(RegressionTarget::Scalar(rng.random_range(-1.0..1.0))),
            None,
            None,
            Some(RegressionTarget::Scalar(0.3)),
            None,
        ];
        let batch = MiniBatch::new(images, targets, labels).unwrap();
        let cfg = RankingConfig {
            margin: 0.5,
            tradeoff: 0.7,
        };
        let mut net = small_net(seed);
        multitask_loss(&batch, &mut net, &cfg).unwrap();
        let analytic = net.params().flat_grad();
        let theta = net.params().flat_values();
        let mut probe = net.clone();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            probe.params_mut().set_flat_values(&t).unwrap();
            let up = multitask_objective(&probe, &batch, &cfg);
            t[k] -= 2.0 * h;
            probe.params_mut().set_flat_values(&t).unwrap();
            let down = multitask_objective(&probe, &batch, &cfg);
            let err = fd_relative_error(analytic[k], (up - down) / (2.0 * h));
            assert!(err <= 1e-5, "seed {seed} param {k}: {err:e}");
        }
    }
}

#[test]
fn random_composite_losses_match_finite_differences() {
    for seed in 0..20 {
        let m = multitask_gradient_check(seed);
        assert!(m <= 1e-5, "multitask seed {seed}: {m:e}");
        let r = ranking_gradient_check(seed);
        assert!(r <= 1e-5, "ranking seed {seed}: {r:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn efficient_equals_naive(
        seed in any::<u64>(),
        m in 1usize..=16,
        groups in 1usize..=4,
        margin in prop::sample::select(vec![0.0, 0.1, 1.0]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, m, groups);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eff = ranking_loss_efficient(&scores, &labels, margin).unwrap();
        let (loss, grad, passes) = ranking_loss_naive(&scores, &labels, margin).unwrap();
        prop_assert!(rel_close(eff.loss, loss, 1e-12));
        for (a, b) in eff.grad.iter().zip(&grad) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        prop_assert_eq!(passes, 2 * labels.comparable_pairs());
        prop_assert_eq!(eff.forward_passes, m);
    }

    #[test]
    fn coefficient_matrix_properties(
        seed in any::<u64>(),
        m in 2usize..=12,
        margin in prop::sample::select(vec![0.0, 0.1, 1.0]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, m, 2);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(-1.5..1.5)).collect();
        let r = ranking_loss_efficient(&scores, &labels, margin).unwrap();
        let a = &r.coefficients;
        let mut any_active = false;
        for i in 0..m {
            prop_assert_eq!(a.get(i, i), 0);
            for j in 0..m {
                let l = labels.get(i, j);
                // Inactive exactly when the hinge argument is non-positive.
                if l == 0 || (l as f64) * (scores[i] - scores[j]) + margin <= 0.0 {
                    prop_assert_eq!(a.get(i, j), 0);
                } else {
                    prop_assert_eq!(a.get(i, j), l);
                    any_active = true;
                }
                prop_assert_eq!(a.get(i, j), -a.get(j, i));
            }
        }
        // Zero loss iff no comparable pair is active.
        prop_assert_eq!(r.loss == 0.0, !any_active);
        // A gradient component can only be nonzero if its row has an active entry.
        for i in 0..m {
            let row_zero = (0..m).all(|j| a.get(i, j) == 0);
            if row_zero {
                prop_assert_eq!(r.grad[i], 0.0);
            }
        }
    }
}
