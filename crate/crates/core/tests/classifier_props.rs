use flowmix::classifier::{ClassifierBundle, ClassifierError};
use flowmix::data::{synth_multimodal, Mode};
use flowmix::em::InitStrategy;
use flowmix::{Dataset, EmConfig, FlowConfig, ModelKind, ModelSpec, RegularizerSpec, Tensor};

fn spec(kind: ModelKind, k: usize, depth: usize) -> ModelSpec {
    ModelSpec {
        kind,
        k,
        flow: FlowConfig::with_depth(depth),
        regularizer: RegularizerSpec::default(),
    }
}

fn config() -> EmConfig {
    EmConfig {
        epochs: 5,
        batch_size: 64,
        learning_rate: 0.02,
        seed: 9,
        ..EmConfig::default()
    }
}

/// Isotropic unit-variance classes centred at `centres`, named `c0, c1, ...`.
fn classes(centres: &[[f64; 2]], per_class: usize, seed: u64) -> Dataset {
    let modes: Vec<Mode> = centres
        .iter()
        .map(|c| Mode {
            mean: c.to_vec(),
            std: 1.0,
            weight: 1.0 / centres.len() as f64,
        })
        .collect();
    let mut ds = synth_multimodal(&modes, per_class * centres.len(), seed).unwrap();
    ds.label_names = (0..centres.len()).map(|i| format!("c{i}")).collect();
    ds
}

const FAR: [[f64; 2]; 3] = [[-12.0, 0.0], [12.0, 0.0], [0.0, 12.0]];

#[test]
fn single_class_bundle_always_predicts_it() {
    let ds = classes(&FAR[..1], 200, 1);
    let (bundle, _) = ClassifierBundle::fit(&ds, &spec(ModelKind::GenMM, 1, 1), &config()).unwrap();
    let probe = Tensor::from_rows(&[vec![100.0, -50.0], vec![0.0, 0.0]]).unwrap();
    assert!(bundle.predict(&probe).unwrap().iter().all(|p| p.class == 0));
}

#[test]
fn distant_gaussian_classes_are_separated() {
    let ds = classes(&FAR[..2], 300, 2);
    let cfg = EmConfig {
        init: InitStrategy::DataDependent,
        ..config()
    };
    let (bundle, _) = ClassifierBundle::fit(&ds, &spec(ModelKind::LatMM, 1, 0), &cfg).unwrap();
    let report = bundle.evaluate_accuracy(&ds).unwrap();
    assert!(report.accuracy > 0.99, "{report:?}");
    let at_means = Tensor::from_rows(&[vec![-12.0, 0.0], vec![12.0, 0.0]]).unwrap();
    let preds = bundle.predict(&at_means).unwrap();
    assert_eq!((preds[0].class, preds[1].class), (0, 1));
}

#[test]
fn identical_class_models_tie_to_lower_index() {
    let ds = classes(&FAR[..2], 100, 3);
    let (bundle, _) = ClassifierBundle::fit(&ds, &spec(ModelKind::GenMM, 1, 1), &config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let first = dir.path().join(ClassifierBundle::model_file_name(0));
    std::fs::copy(&first, dir.path().join(ClassifierBundle::model_file_name(1))).unwrap();
    let twins = ClassifierBundle::load(dir.path()).unwrap();
    for p in twins.predict(&ds.samples).unwrap() {
        assert_eq!(p.class, 0);
        assert!((p.log_likelihoods[0] - p.log_likelihoods[1]).abs() < 1e-12);
    }
}

#[test]
fn adding_to_an_empty_bundle_equals_fitting_one_class() {
    let ds = classes(&FAR[..1], 150, 4);
    let s = spec(ModelKind::LatMM, 2, 1);
    let (fitted, _) = ClassifierBundle::fit(&ds, &s, &config()).unwrap();
    let mut grown = ClassifierBundle::empty(&s, &config());
    grown.add_class("c0", &ds).unwrap();
    assert_eq!(grown, fitted);
}

#[test]
fn add_class_leaves_existing_models_and_predictions_alone() {
    let all = classes(&FAR, 120, 5);
    let mut two = all.subset(&(0..all.len()).filter(|&i| all.labels.as_ref().unwrap()[i] < 2).collect::<Vec<_>>());
    two.label_names.truncate(2);
    let s = spec(ModelKind::GenMM, 1, 1);
    let (mut bundle, _) = ClassifierBundle::fit(&two, &s, &config()).unwrap();
    let before = bundle.predict(&all.samples).unwrap();

    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let read = |i: usize| std::fs::read(dir.path().join(ClassifierBundle::model_file_name(i))).unwrap();
    let old_files = (read(0), read(1));

    bundle.add_class("c2", &all.class_subset(2)).unwrap();
    bundle.save(dir.path()).unwrap();
    assert_eq!((read(0), read(1)), old_files);

    for (old, new) in before.iter().zip(bundle.predict(&all.samples).unwrap()) {
        assert_eq!(old.log_likelihoods[..], new.log_likelihoods[..2]);
        if new.class != 2 {
            assert_eq!(new.class, old.class);
        }
    }
    let (joint, _) = ClassifierBundle::fit(&all, &s, &config()).unwrap();
    assert_eq!(bundle, joint);
    assert!(matches!(bundle.add_class("c2", &all.class_subset(2)), Err(ClassifierError::Conflict(_))));
}

#[test]
fn uniform_log_prior_shift_keeps_predictions() {
    let ds = classes(&FAR, 80, 6);
    let (mut bundle, _) = ClassifierBundle::fit(&ds, &spec(ModelKind::GenMM, 1, 1), &config()).unwrap();
    let plain: Vec<usize> = bundle.predict(&ds.samples).unwrap().iter().map(|p| p.class).collect();
    bundle.class_log_prior = Some(vec![-7.5; 3]);
    let shifted: Vec<usize> = bundle.predict(&ds.samples).unwrap().iter().map(|p| p.class).collect();
    assert_eq!(plain, shifted);
}

#[test]
fn unseen_labels_count_as_errors() {
    let train = classes(&FAR[..2], 100, 7);
    let (bundle, _) = ClassifierBundle::fit(&train, &spec(ModelKind::GenMM, 1, 1), &config()).unwrap();
    let mut test = classes(&FAR, 50, 8);
    test.label_names[2] = "unknown".into();
    let report = bundle.evaluate_accuracy(&test).unwrap();
    let unseen = test.labels.as_ref().unwrap().iter().filter(|&&l| l == 2).count();
    assert_eq!(report.unseen, unseen);
    assert!(report.correct <= report.total - unseen);
    assert!(report.accuracy <= 1.0 - unseen as f64 / report.total as f64 + 1e-12);
}

#[test]
fn dimension_and_label_errors() {
    let ds = classes(&FAR[..2], 50, 9);
    let (bundle, _) = ClassifierBundle::fit(&ds, &spec(ModelKind::GenMM, 1, 1), &config()).unwrap();
    let wide = Tensor::zeros(&[1, 3]);
    assert!(matches!(bundle.predict(&wide), Err(ClassifierError::DimMismatch { expected: 2, got: 3 })));
    let unlabeled = Dataset::unlabeled(ds.samples.clone(), "u").unwrap();
    assert!(matches!(
        ClassifierBundle::fit(&unlabeled, &spec(ModelKind::GenMM, 1, 1), &config()),
        Err(ClassifierError::Unlabeled)
    ));
}

#[test]
fn bundle_persistence_round_trip() {
    let ds = classes(&FAR, 60, 10);
    let (mut bundle, _) = ClassifierBundle::fit(&ds, &spec(ModelKind::LatMM, 2, 1), &config()).unwrap();
    bundle.set_empirical_prior(&ds).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    bundle.save(a.path()).unwrap();
    let loaded = ClassifierBundle::load(a.path()).unwrap();
    assert_eq!(loaded, bundle);
    loaded.save(b.path()).unwrap();
    for name in std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()) {
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn accuracy_curve_has_one_row_per_epoch() {
    let ds = classes(&FAR[..2], 60, 11);
    let (_, logs, curve) = ClassifierBundle::fit_with_curve(&ds, &spec(ModelKind::GenMM, 1, 1), &config(), &[&ds]).unwrap();
    assert_eq!(curve.len(), config().epochs);
    assert!(logs.iter().all(|l| l.records.len() == config().epochs));
    assert!(curve.iter().all(|row| row.len() == 1 && (0.0..=1.0).contains(&row[0])));
}
