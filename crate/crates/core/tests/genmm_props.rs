mod common;

use common::{random_flow, rng, uniform_matrix};
use flowmix::data::{synth_multimodal, Mode};
use flowmix::em::{InitStrategy, Responsibilities};
use flowmix::genmm::{self, Selection};
use flowmix::{Dataset, EmConfig, FlowConfig, GenMM, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_genmm(k: usize, dim: usize, seed: u64) -> GenMM {
    let mut r = rng(seed);
    let generators = (0..k).map(|_| random_flow(dim, &FlowConfig::with_depth(2), 0.3, &mut r)).collect();
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    GenMM::from_parts(raw.iter().map(|p| p / total).collect(), generators).unwrap()
}

/// Component log-likelihoods evaluated one generator at a time.
fn per_component(model: &GenMM, x: &Tensor) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = model.generators().iter().map(|f| f.log_prob(x).unwrap()).collect();
    (0..x.rows()).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

#[test]
fn q_objective_matches_double_loop() {
    let model = random_genmm(2, 3, 4);
    let x = uniform_matrix(&mut rng(5), 3, 3, 1.5);
    let gamma = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
    let ell = per_component(&model, &x);
    let mut expected = 0.0;
    for i in 0..3 {
        for k in 0..2 {
            expected += gamma.get(i, k) * (model.pi()[k].ln() + ell[i][k]);
        }
    }
    let q = model.q_objective(&Responsibilities::from_matrix(gamma).unwrap(), &x).unwrap();
    assert!((q - expected).abs() < 1e-10 * expected.abs().max(1.0), "{q} vs {expected}");
}

#[test]
fn one_hot_gamma_selects_component_terms() {
    let model = random_genmm(2, 2, 6);
    let x = uniform_matrix(&mut rng(7), 2, 2, 1.0);
    let gamma = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let ell = per_component(&model, &x);
    let expected = model.pi()[0].ln() + ell[0][0] + model.pi()[1].ln() + ell[1][1];
    let q = model.q_objective(&Responsibilities::from_matrix(gamma).unwrap(), &x).unwrap();
    assert!((q - expected).abs() < 1e-10);
}

#[test]
fn nll_matches_naive_density_sum() {
    let model = random_genmm(3, 2, 11);
    let x = uniform_matrix(&mut rng(12), 40, 2, 2.0);
    let ell = per_component(&model, &x);
    let total: f64 = ell
        .iter()
        .map(|row| row.iter().zip(model.pi()).map(|(l, p)| p * l.exp()).sum::<f64>().ln())
        .sum();
    let expected = -total / 80.0;
    let nll = model.evaluate_nll(&Dataset::unlabeled(x, "x").unwrap()).unwrap();
    assert!((nll - expected).abs() < 1e-10, "{nll} vs {expected}");
}

#[test]
fn duplicated_component_matches_single() {
    let single = random_genmm(1, 3, 13);
    let twin = GenMM::from_parts(vec![0.5, 0.5], vec![single.generators()[0].clone(); 2]).unwrap();
    let data = Dataset::unlabeled(uniform_matrix(&mut rng(14), 30, 3, 2.0), "x").unwrap();
    let (a, b) = (single.evaluate_nll(&data).unwrap(), twin.evaluate_nll(&data).unwrap());
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn nll_invariant_under_component_permutation() {
    let model = random_genmm(3, 2, 15);
    let order = [2, 0, 1];
    let permuted = GenMM::from_parts(
        order.iter().map(|&k| model.pi()[k]).collect(),
        order.iter().map(|&k| model.generators()[k].clone()).collect(),
    )
    .unwrap();
    let data = Dataset::unlabeled(uniform_matrix(&mut rng(16), 25, 2, 2.0), "x").unwrap();
    let (a, b) = (model.evaluate_nll(&data).unwrap(), permuted.evaluate_nll(&data).unwrap());
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn interpolation_endpoints_reconstruct_inputs() {
    let model = random_genmm(2, 4, 17);
    let mut r = rng(18);
    let x = uniform_matrix(&mut r, 2, 4, 1.5);
    for selection in [Selection::ArgmaxGamma, Selection::RandomPrior] {
        let path = model.interpolate(x.row(0), x.row(1), 6, selection, &mut r).unwrap();
        assert_eq!(path.rows(), 6);
        for j in 0..4 {
            assert!((path.get(0, j) - x.get(0, j)).abs() < 1e-6);
            assert!((path.get(5, j) - x.get(1, j)).abs() < 1e-6);
        }
    }
}

#[test]
fn single_component_learns_standard_normal_entropy() {
    let modes = [Mode {
        mean: vec![0.0, 0.0],
        std: 1.0,
        weight: 1.0,
    }];
    let data = synth_multimodal(&modes, 4000, 19).unwrap();
    let cfg = EmConfig {
        epochs: 20,
        learning_rate: 0.01,
        seed: 3,
        init: InitStrategy::Identity,
        ..EmConfig::default()
    };
    let (model, log) = genmm::fit(1, &FlowConfig::with_depth(2), &data, &cfg).unwrap();
    let target = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5;
    let final_nll = log.final_nll().unwrap();
    assert!((final_nll - target).abs() < 0.05, "{final_nll} vs {target}");
    assert!((model.evaluate_nll(&data).unwrap() - final_nll).abs() < 1e-12);
}

#[test]
fn sampling_is_seed_deterministic() {
    let model = random_genmm(3, 2, 20);
    let (a, la) = model.sample(50, &mut rng(1)).unwrap();
    let (b, lb) = model.sample(50, &mut rng(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(model.log_likelihood(&a).unwrap().iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_are_softmax_monotone(
        ell in prop::collection::vec(-20.0f64..5.0, 3),
        raw_pi in prop::collection::vec(0.05f64..1.0, 3),
        bump in 0.01f64..3.0,
        which in 0usize..3,
    ) {
        let total: f64 = raw_pi.iter().sum();
        let pi: Vec<f64> = raw_pi.iter().map(|p| p / total).collect();
        let gamma = Responsibilities::from_log_likelihoods(&Tensor::matrix(1, 3, ell.clone()).unwrap(), &pi, 1.0).unwrap();
        let row = gamma.row(0);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // direct softmax oracle
        let w: Vec<f64> = ell.iter().zip(&pi).map(|(l, p)| p.ln() + l).collect();
        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = w.iter().map(|v| (v - m).exp()).sum();
        for k in 0..3 {
            prop_assert!((row[k] - (w[k] - m).exp() / z).abs() < 1e-12);
        }
        let mut raised = ell.clone();
        raised[which] += bump;
        let after = Responsibilities::from_log_likelihoods(&Tensor::matrix(1, 3, raised).unwrap(), &pi, 1.0).unwrap();
        if row[which] < 1.0 - 1e-9 {
            prop_assert!(after.row(0)[which] > row[which]);
        }
    }

    #[test]
    fn prior_update_is_column_mean(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..30)) {
        let normalised: Vec<Vec<f64>> = rows.iter().map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        }).collect();
        let gamma = Responsibilities::from_matrix(Tensor::from_rows(&normalised).unwrap()).unwrap();
        let mut model = random_genmm(4, 2, 21);
        model.update_prior(&gamma.column_means());
        for k in 0..4 {
            let mean = normalised.iter().map(|r| r[k]).sum::<f64>() / normalised.len() as f64;
            prop_assert!((model.pi()[k] - mean).abs() < 1e-12);
        }
        prop_assert!((model.pi().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(model.pi().iter().all(|&p| p >= 0.0));
    }
}
