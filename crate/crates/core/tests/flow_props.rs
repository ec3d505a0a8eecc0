mod common;

use common::{determinant, fd_jacobian, random_config, random_flow, rng, uniform_matrix};
use flowmix::flow::{Actnorm, Layer, Permutation};
use flowmix::{FlowConfig, FlowNetwork, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generate_inverts_infer(seed in any::<u64>(), dim in 2usize..12, depth in 0usize..5) {
        let mut r = rng(seed);
        let cfg = random_config(dim, depth, &mut r);
        let net = random_flow(dim, &cfg, 0.4, &mut r);
        let x = uniform_matrix(&mut r, 16, dim, 3.0);
        let (z, _) = net.inverse_infer(&x).unwrap();
        prop_assert!(max_abs_diff(&net.forward_generate(&z).unwrap(), &x) < 1e-6);
        let z2 = uniform_matrix(&mut r, 16, dim, 2.0);
        let x2 = net.forward_generate(&z2).unwrap();
        prop_assert!(max_abs_diff(&net.inverse_infer(&x2).unwrap().0, &z2) < 1e-6);
    }

    #[test]
    fn actnorm_contributes_sum_of_log_scales(scale in prop::collection::vec(0.1f64..5.0, 1..8), seed in any::<u64>()) {
        let dim = scale.len();
        let mut r = rng(seed);
        let shift: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let net = FlowNetwork::from_layers(dim, 5.0, vec![Layer::Actnorm(Actnorm::from_scale(&scale, &shift))]).unwrap();
        let x = uniform_matrix(&mut r, 5, dim, 2.0);
        let (z, logdet) = net.inverse_infer(&x).unwrap();
        let expected: f64 = scale.iter().map(|s| s.ln()).sum();
        for (i, ld) in logdet.iter().enumerate() {
            prop_assert!((ld - expected).abs() < 1e-12);
            for j in 0..dim {
                prop_assert!((z.get(i, j) - (scale[j] * x.get(i, j) + shift[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_contributes_nothing(perm in (1usize..9).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle()), seed in any::<u64>()) {
        let dim = perm.len();
        let net = FlowNetwork::from_layers(dim, 5.0, vec![Layer::Permutation(Permutation::custom(perm.clone()).unwrap())]).unwrap();
        let x = uniform_matrix(&mut rng(seed), 4, dim, 2.0);
        let (z, logdet) = net.inverse_infer(&x).unwrap();
        prop_assert!(logdet.iter().all(|&l| l == 0.0));
        for i in 0..4 {
            for (j, &p) in perm.iter().enumerate() {
                prop_assert_eq!(z.get(i, j), x.get(i, p));
            }
        }
    }

    #[test]
    fn permutation_then_inverse_leaves_log_prob(seed in any::<u64>(), dim in 2usize..8, at in 0usize..20) {
        let mut r = rng(seed);
        let net = random_flow(dim, &FlowConfig::with_depth(2), 0.4, &mut r);
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.rotate_left(1 + seed as usize % dim);
        let forward = Permutation::custom(perm).unwrap();
        let back = Permutation::custom(forward.inverse()).unwrap();
        let mut layers = net.layers().to_vec();
        let at = at % (layers.len() + 1);
        layers.insert(at, Layer::Permutation(back));
        layers.insert(at, Layer::Permutation(forward));
        let padded = FlowNetwork::from_layers(dim, net.clamp(), layers).unwrap();
        let x = uniform_matrix(&mut r, 8, dim, 2.0);
        let (a, b) = (net.log_prob(&x).unwrap(), padded.log_prob(&x).unwrap());
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn own_samples_have_finite_log_prob(seed in any::<u64>(), dim in 2usize..10, depth in 0usize..4) {
        let mut r = rng(seed);
        let cfg = random_config(dim, depth, &mut r);
        let net = random_flow(dim, &cfg, 0.4, &mut r);
        let x = net.sample(32, &mut r).unwrap();
        prop_assert!(net.log_prob(&x).unwrap().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn three_step_network_logdet_matches_numeric_jacobian() {
    let mut r = rng(31);
    for _ in 0..10 {
        let net = random_flow(4, &FlowConfig::with_depth(3), 0.5, &mut r);
        let x = uniform_matrix(&mut r, 1, 4, 1.5);
        let (_, logdet) = net.inverse_infer(&x).unwrap();
        let f = |v: &[f64]| net.inverse_infer(&Tensor::matrix(1, 4, v.to_vec()).unwrap()).unwrap().0.into_data();
        let det = determinant(fd_jacobian(f, x.row(0), 1e-5));
        let rel = (logdet[0].exp() - det.abs()).abs() / det.abs();
        assert!(rel < 1e-4, "relative determinant error {rel}");
    }
}

#[test]
fn identity_sample_mean_is_near_zero() {
    let net = FlowNetwork::identity(3);
    let n = 100_000;
    let x = net.sample(n, &mut rng(8)).unwrap();
    // 3σ/√n with σ = 1
    let bound = 3.0 / (n as f64).sqrt();
    assert!(bound < 0.02);
    for j in 0..3 {
        let mean = x.column(j).iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < bound, "coordinate {j} mean {mean}");
    }
}
