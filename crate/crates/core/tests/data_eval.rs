mod common;

use common::{rng, uniform_matrix};
use flowmix::data::{self, load_csv, ring_modes, synth_multimodal, CsvOptions, DataError, IdxOptions, LabelColumn, Mode};
use flowmix::em::BatchIterator;
use flowmix::eval::{mmd_gaussian, nll_vs_k, one_nn_two_sample, EvalError, KOutcome};
use flowmix::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use std::collections::HashSet;

fn gaussian_pool(n: usize, dim: usize, offset: f64, seed: u64) -> Tensor {
    let modes = [Mode {
        mean: vec![offset; dim],
        std: 1.0,
        weight: 1.0,
    }];
    synth_multimodal(&modes, n, seed).unwrap().samples
}

fn brute_mmd2(a: &Tensor, b: &Tensor, h: f64) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum();
        (-d / (2.0 * h * h)).exp()
    };
    let within = |t: &Tensor| {
        let n = t.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += k(t.row(i), t.row(j));
                }
            }
        }
        s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += k(a.row(i), b.row(j));
        }
    }
    within(a) + within(b) - 2.0 * cross / (a.rows() * b.rows()) as f64
}

fn brute_one_nn(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    let pooled: Vec<&[f64]> = (0..n).map(|i| a.row(i)).chain((0..n).map(|i| b.row(i))).collect();
    let mut correct = 0;
    for i in 0..2 * n {
        let mut best = (f64::INFINITY, 0);
        for (j, p) in pooled.iter().enumerate() {
            if j != i {
                let d: f64 = pooled[i].iter().zip(*p).map(|(u, v)| (u - v).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        if (best.1 < n) == (i < n) {
            correct += 1;
        }
    }
    correct as f64 / (2 * n) as f64
}

#[test]
fn csv_file_round_trip_and_missing_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "1,2,A\n3,4,B\n5,6,A\n").unwrap();
    let opts = CsvOptions {
        label_column: Some(LabelColumn::Index(2)),
        ..CsvOptions::default()
    };
    let ds = load_csv(&path, &opts).unwrap();
    assert_eq!(ds.samples.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(ds.labels.as_deref(), Some(&[0, 1, 0][..]));
    assert_eq!(ds.label_names, vec!["A", "B"]);

    let missing = dir.path().join("absent.csv");
    let err = load_csv(&missing, &opts).unwrap_err();
    assert!(err.to_string().contains("absent.csv"), "{err}");

    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_csv(&path, &opts), Err(DataError::EmptyDataset)));
}

#[test]
fn non_finite_values_are_rejected() {
    for text in ["1,nan\n2,3", "inf,1", "1,2\n3"] {
        assert!(data::parse_csv(text, &CsvOptions::default(), "t").is_err(), "{text:?}");
    }
}

#[test]
fn idx_downsampling_of_constant_images() {
    let images = vec![vec![255u8; 28 * 28]; 2];
    let (img, lab) = data::encode_idx(&images, 28, 28, &[3, 7]);
    let opts = IdxOptions {
        target_grid: Some((7, 7)),
    };
    let ds = data::parse_idx(&img, Some(&lab), opts, "idx").unwrap();
    assert_eq!((ds.len(), ds.dim()), (2, 49));
    assert!(ds.samples.data().iter().all(|&v| v == 1.0));
    let truncated = &lab[..lab.len() - 1];
    assert!(data::parse_idx(&img, Some(truncated), opts, "idx").is_err());
}

#[test]
fn ring_mode_frequencies_within_binomial_bound() {
    let n = 20_000;
    let ds = synth_multimodal(&ring_modes(4, 5.0, 0.3), n, 3).unwrap();
    let labels = ds.labels.as_ref().unwrap();
    for k in 0..4 {
        let freq = labels.iter().filter(|&&l| l == k).count() as f64 / n as f64;
        let bound = 3.0 * (0.25 * 0.75 / n as f64).sqrt();
        assert!((freq - 0.25).abs() < bound, "mode {k}: {freq}");
    }
}

#[test]
fn two_mode_sample_mean_within_clt_bound() {
    let (w, n) = (0.3, 200_000);
    let modes = [
        Mode {
            mean: vec![-3.0],
            std: 1.0,
            weight: w,
        },
        Mode {
            mean: vec![3.0],
            std: 1.0,
            weight: 1.0 - w,
        },
    ];
    let ds = synth_multimodal(&modes, n, 4).unwrap();
    let mean_expected = -3.0 * w + 3.0 * (1.0 - w);
    let var = 1.0 + 9.0 - mean_expected * mean_expected;
    let mean = ds.samples.data().iter().sum::<f64>() / n as f64;
    assert!((mean - mean_expected).abs() < 3.0 * (var / n as f64).sqrt(), "{mean}");
}

#[test]
fn mmd_matches_brute_force_and_is_symmetric() {
    let mut r = rng(5);
    let a = uniform_matrix(&mut r, 30, 3, 2.0);
    let b = uniform_matrix(&mut r, 40, 3, 2.5);
    let ab = mmd_gaussian(&a, &b, None).unwrap();
    let ba = mmd_gaussian(&b, &a, None).unwrap();
    assert_eq!(ab.mmd2.to_bits(), ba.mmd2.to_bits());
    assert!((ab.mmd2 - brute_mmd2(&a, &b, ab.bandwidth)).abs() < 1e-12);
}

#[test]
fn metrics_are_invariant_to_row_order() {
    let a = gaussian_pool(200, 2, 0.0, 6);
    let b = gaussian_pool(200, 2, 0.5, 7);
    let mut order: Vec<usize> = (0..200).collect();
    order.shuffle(&mut rng(8));
    let (pa, pb) = (a.select_rows(&order), b.select_rows(&order));
    assert_eq!(mmd_gaussian(&a, &b, None).unwrap(), mmd_gaussian(&pa, &pb, None).unwrap());
    assert_eq!(one_nn_two_sample(&a, &b, 0).unwrap(), one_nn_two_sample(&pa, &pb, 0).unwrap());
    assert_eq!(one_nn_two_sample(&a, &b, 0).unwrap(), brute_one_nn(&a, &b));
}

#[test]
fn separated_and_identical_pools() {
    let a = gaussian_pool(500, 1, 0.0, 9);
    let b = gaussian_pool(500, 1, 5.0, 10);
    assert!(mmd_gaussian(&a, &b, None).unwrap().mmd2 > 0.5);
    let far = gaussian_pool(500, 1, 40.0, 10);
    assert_eq!(one_nn_two_sample(&a, &far, 0).unwrap(), 1.0);
    assert!(mmd_gaussian(&a, &a, None).unwrap().mmd2 <= 1e-12);
    assert_eq!(one_nn_two_sample(&a, &a, 0).unwrap(), 0.0);
}

#[test]
fn same_distribution_pools_look_alike() {
    let a = gaussian_pool(500, 2, 0.0, 11);
    let b = gaussian_pool(500, 2, 0.0, 12);
    assert!(mmd_gaussian(&a, &b, None).unwrap().mmd2.abs() < 0.02);
    let acc = one_nn_two_sample(&a, &b, 0).unwrap();
    assert!((0.40..=0.60).contains(&acc), "{acc}");
}

#[test]
fn unequal_pools_are_subsampled_reproducibly() {
    let a = gaussian_pool(50, 2, 0.0, 13);
    let b = gaussian_pool(80, 2, 0.0, 14);
    assert_eq!(one_nn_two_sample(&a, &b, 3).unwrap(), one_nn_two_sample(&a, &b, 3).unwrap());
    let tiny = gaussian_pool(1, 2, 0.0, 15);
    assert!(matches!(one_nn_two_sample(&tiny, &b, 0), Err(EvalError::InsufficientSamples { got: 1 })));
}

#[test]
fn nll_vs_k_records_failures_without_stopping() {
    let ds = synth_multimodal(&ring_modes(2, 3.0, 0.5), 200, 16).unwrap();
    let (train, held) = ds.split(0.75, 1);
    let cfg = flowmix::EmConfig {
        epochs: 2,
        ..flowmix::EmConfig::default()
    };
    let spec = |k| flowmix::ModelSpec {
        kind: flowmix::ModelKind::GenMM,
        k,
        flow: flowmix::FlowConfig::with_depth(1),
        regularizer: flowmix::RegularizerSpec::default(),
    };
    let bad = flowmix::EmConfig {
        learning_rate: -1.0,
        ..cfg.clone()
    };
    let report = nll_vs_k(&[1, 2], &train, &held, |k, d| {
        flowmix::mixture::fit(&spec(k), d, if k == 2 { &bad } else { &cfg })
    })
    .unwrap();
    assert!(matches!(report.rows[0].1, KOutcome::Trained { .. }));
    assert!(matches!(report.rows[1].1, KOutcome::Failed { .. }));
    let csv = report.to_csv(&[]);
    assert!(csv.lines().any(|l| l.starts_with("2,")), "{csv}");
}

proptest! {
    #[test]
    fn batches_cover_every_sample_once(n in 1usize..300, b in 1usize..64, seed in any::<u64>()) {
        let mut it = BatchIterator::new(n, b, seed);
        for _ in 0..2 {
            let batches = it.next_epoch();
            prop_assert_eq!(batches.len(), n.div_ceil(b));
            let all: Vec<usize> = batches.concat();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(all.iter().collect::<HashSet<_>>().len(), n);
        }
    }

    #[test]
    fn dequantized_integers_floor_back(pixels in prop::collection::vec(0u8..=255, 1..40), seed in any::<u64>()) {
        let n = pixels.len();
        let x = Tensor::matrix(n, 1, pixels.iter().map(|&p| p as f64).collect()).unwrap();
        let ds = flowmix::Dataset::unlabeled(x, "px").unwrap();
        let (noisy, _) = data::preprocess(&ds, data::Preprocess::Dequantize { scale: 1.0, seed });
        for (v, p) in noisy.samples.data().iter().zip(&pixels) {
            prop_assert_eq!(v.floor(), *p as f64);
        }
    }
}
