//! Generative classification: one mixture model per class, prediction by the
//! largest class log-likelihood.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::em::{EmConfig, TrainingLog};
use crate::error::ModelError;
use crate::mixture::{self, MixtureModel, ModelSpec};
use crate::persist::PersistError;
use crate::settings::{Settings, SettingsError};

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_TAG: &str = "flowmix-classifier";
const FORMAT_VERSION: u32 = 1;

/// Environment variable capping the number of classes trained at once.
pub const THREADS_ENV: &str = "FLOWMIX_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("dataset has no labels")]
    Unlabeled,
    #[error("class {0:?} has no samples")]
    EmptyClass(String),
    #[error("class {0:?} is already in the bundle")]
    Conflict(String),
    #[error("invalid class id {0:?}")]
    BadClassId(String),
    #[error("dimension mismatch: bundle expects {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("sample {index} has zero likelihood under every class")]
    Unscorable { index: usize },
    #[error("the bundle has no classes")]
    Empty,
    #[error("training class {class:?} failed at epoch {epoch}: {source}")]
    Training {
        class: String,
        epoch: usize,
        #[source]
        source: ModelError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Persist {
        path: PathBuf,
        #[source]
        source: PersistError,
    },
    #[error("bundle manifest: {0}")]
    Manifest(String),
    #[error("bundle manifest: {0}")]
    Settings(#[from] SettingsError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Training seed for one class: the base seed offset by a hash of the class id,
/// so a class trains identically however the bundle was assembled.
pub fn class_seed(base: u64, class_id: &str) -> u64 {
    base.wrapping_add(fnv1a(class_id.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub log_likelihoods: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Test samples whose label is not a class of the bundle (all counted wrong).
    pub unseen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    class_ids: Vec<String>,
    models: Vec<MixtureModel>,
    settings: Settings,
    /// Optional additive log class prior; off by default.
    pub class_log_prior: Option<Vec<f64>>,
}

impl ClassifierBundle {
    /// A bundle with no classes yet.
    pub fn empty(spec: &ModelSpec, config: &EmConfig) -> Self {
        Self {
            class_ids: Vec::new(),
            models: Vec::new(),
            settings: Settings {
                spec: spec.clone(),
                em: config.clone(),
            },
            class_log_prior: None,
        }
    }

    /// Trains one model per label of `data`, classes in parallel.
    pub fn fit(data: &Dataset, spec: &ModelSpec, config: &EmConfig) -> Result<(Self, Vec<TrainingLog>)> {
        let (bundle, logs, _) = Self::fit_inner(data, spec, config, false)?;
        Ok((bundle, logs))
    }

    /// [`Self::fit`] that also records every class model after each epoch and
    /// returns the accuracy of the epoch-`t` bundle on each of `eval_sets`
    /// (`curve[t][j]`).
    pub fn fit_with_curve(
        data: &Dataset,
        spec: &ModelSpec,
        config: &EmConfig,
        eval_sets: &[&Dataset],
    ) -> Result<(Self, Vec<TrainingLog>, Vec<Vec<f64>>)> {
        let (bundle, logs, snapshots) = Self::fit_inner(data, spec, config, true)?;
        let epochs = snapshots.iter().map(Vec::len).min().unwrap_or(0);
        let mut curve = Vec::with_capacity(epochs);
        for t in 0..epochs {
            let mut at_epoch = bundle.clone();
            at_epoch.models = snapshots.iter().map(|s| s[t].clone()).collect();
            let row = eval_sets
                .iter()
                .map(|d| at_epoch.evaluate_accuracy(d).map(|r| r.accuracy))
                .collect::<Result<Vec<_>>>()?;
            curve.push(row);
        }
        Ok((bundle, logs, curve))
    }

    #[allow(clippy::type_complexity)]
    fn fit_inner(
        data: &Dataset,
        spec: &ModelSpec,
        config: &EmConfig,
        keep_snapshots: bool,
    ) -> Result<(Self, Vec<TrainingLog>, Vec<Vec<MixtureModel>>)> {
        if data.labels.is_none() {
            return Err(ClassifierError::Unlabeled);
        }
        let classes: Vec<(String, Dataset)> = data
            .label_names
            .iter()
            .enumerate()
            .map(|(y, id)| (id.clone(), data.class_subset(y)))
            .collect();
        for (id, subset) in &classes {
            check_class_id(id)?;
            if subset.is_empty() {
                return Err(ClassifierError::EmptyClass(id.clone()));
            }
        }
        let pool = thread_pool()?;
        let trained: Vec<Result<(MixtureModel, TrainingLog, Vec<MixtureModel>)>> = pool.install(|| {
            classes
                .par_iter()
                .map(|(id, subset)| train_class(id, subset, spec, config, keep_snapshots))
                .collect()
        });
        let mut bundle = Self::empty(spec, config);
        let mut logs = Vec::new();
        let mut snapshots = Vec::new();
        for ((id, _), result) in classes.into_iter().zip(trained) {
            let (model, log, snaps) = result?;
            bundle.class_ids.push(id);
            bundle.models.push(model);
            logs.push(log);
            snapshots.push(snaps);
        }
        Ok((bundle, logs, snapshots))
    }

    /// Trains and appends a model for a new class; existing models are untouched.
    pub fn add_class(&mut self, class_id: &str, samples: &Dataset) -> Result<TrainingLog> {
        check_class_id(class_id)?;
        if self.class_ids.iter().any(|c| c == class_id) {
            return Err(ClassifierError::Conflict(class_id.to_string()));
        }
        if samples.is_empty() {
            return Err(ClassifierError::EmptyClass(class_id.to_string()));
        }
        if let Some(d) = self.dim() {
            if samples.dim() != d {
                return Err(ClassifierError::DimMismatch {
                    expected: d,
                    got: samples.dim(),
                });
            }
        }
        let (model, log, _) = train_class(class_id, samples, &self.settings.spec, &self.settings.em, false)?;
        self.class_ids.push(class_id.to_string());
        self.models.push(model);
        if let Some(prior) = &mut self.class_log_prior {
            // The new class has no frequency information; give it the smallest known weight.
            let floor = prior.iter().copied().fold(f64::INFINITY, f64::min);
            prior.push(if floor.is_finite() { floor } else { 0.0 });
        }
        Ok(log)
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn models(&self) -> &[MixtureModel] {
        &self.models
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.models.first().map(MixtureModel::dim)
    }

    /// Sets the additive log prior to the empirical class frequencies of `data`.
    pub fn set_empirical_prior(&mut self, data: &Dataset) -> Result<()> {
        let labels = data.labels.as_ref().ok_or(ClassifierError::Unlabeled)?;
        let mut counts = vec![0usize; self.len()];
        for &l in labels {
            if let Some(c) = self.class_index(&data.label_names[l]) {
                counts[c] += 1;
            }
        }
        let n = labels.len().max(1) as f64;
        self.class_log_prior = Some(counts.iter().map(|&c| (c as f64 / n).ln()).collect());
        Ok(())
    }

    pub fn class_index(&self, id: &str) -> Option<usize> {
        self.class_ids.iter().position(|c| c == id)
    }

    /// `[n × Y]` class log-likelihoods; rows a model cannot score come out as `-∞`.
    pub fn class_log_likelihoods(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim().ok_or(ClassifierError::Empty)?;
        if x.shape().len() != 2 || x.cols() != d {
            return Err(ClassifierError::DimMismatch {
                expected: d,
                got: if x.shape().len() == 2 { x.cols() } else { x.numel() },
            });
        }
        let columns: Vec<Vec<f64>> = self
            .models
            .par_iter()
            .map(|m| match m.log_likelihood(x) {
                Ok(v) => v,
                Err(_) => (0..x.rows())
                    .map(|i| {
                        m.log_likelihood(&x.select_rows(&[i]))
                            .map_or(f64::NEG_INFINITY, |v| v[0])
                    })
                    .collect(),
            })
            .collect();
        let mut out = Tensor::zeros(&[x.rows(), self.len()]);
        for (c, col) in columns.iter().enumerate() {
            let prior = self.class_log_prior.as_ref().map_or(0.0, |p| p[c]);
            for (i, &v) in col.iter().enumerate() {
                out.set(i, c, if v.is_nan() { f64::NEG_INFINITY } else { v + prior });
            }
        }
        Ok(out)
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        let ll = self.class_log_likelihoods(x)?;
        (0..ll.rows())
            .map(|i| {
                let row = ll.row(i);
                let mut best = None;
                for (c, &v) in row.iter().enumerate() {
                    if v > f64::NEG_INFINITY && best.is_none_or(|b: usize| v > row[b]) {
                        best = Some(c);
                    }
                }
                best.map(|class| Prediction {
                    class,
                    log_likelihoods: row.to_vec(),
                })
                .ok_or(ClassifierError::Unscorable { index: i })
            })
            .collect()
    }

    /// Fraction of `test` predicted correctly; labels are matched to classes by name.
    pub fn evaluate_accuracy(&self, test: &Dataset) -> Result<AccuracyReport> {
        let labels = test.labels.as_ref().ok_or(ClassifierError::Unlabeled)?;
        let truth: Vec<Option<usize>> = labels.iter().map(|&l| self.class_index(&test.label_names[l])).collect();
        let unseen = truth.iter().filter(|t| t.is_none()).count();
        if unseen > 0 {
            log::warn!("{unseen} test samples carry labels unknown to the classifier");
        }
        let total = test.len();
        let mut correct = 0;
        if total > 0 {
            for (p, t) in self.predict(&test.samples)?.iter().zip(&truth) {
                if Some(p.class) == *t {
                    correct += 1;
                }
            }
        }
        Ok(AccuracyReport {
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            correct,
            total,
            unseen,
        })
    }

    pub fn model_file_name(index: usize) -> String {
        format!("class_{index}.model")
    }

    /// Writes `manifest.txt` plus one model file per class into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ClassifierError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut manifest = vec![
            format!("format={FORMAT_TAG}"),
            format!("version={FORMAT_VERSION}"),
            format!("classes={}", self.len()),
        ];
        for (i, id) in self.class_ids.iter().enumerate() {
            manifest.push(format!("class.{i}={id}"));
            manifest.push(format!("file.{i}={}", Self::model_file_name(i)));
        }
        if let Some(prior) = &self.class_log_prior {
            manifest.push(format!("class_log_prior={}", crate::persist::fmt_f64_list(prior)));
        }
        manifest.extend(self.settings.to_lines().into_iter().map(|l| format!("config.{l}")));
        for (i, m) in self.models.iter().enumerate() {
            let path = dir.join(Self::model_file_name(i));
            let bytes = m.to_bytes();
            if fs::read(&path).is_ok_and(|old| old == bytes) {
                continue;
            }
            fs::write(&path, bytes).map_err(io(&path))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.join("\n") + "\n").map_err(io(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| ClassifierError::Io {
            path: path.clone(),
            source,
        })?;
        let mut entries = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ClassifierError::Manifest(format!("expected key=value, got {line:?}")))?;
            entries.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            entries
                .get(k)
                .cloned()
                .ok_or_else(|| ClassifierError::Manifest(format!("missing key {k:?}")))
        };
        if get("format")? != FORMAT_TAG {
            return Err(ClassifierError::Manifest("not a classifier bundle".into()));
        }
        if get("version")? != FORMAT_VERSION.to_string() {
            return Err(ClassifierError::Manifest(format!("unsupported version {}", get("version")?)));
        }
        let n: usize = get("classes")?
            .parse()
            .map_err(|_| ClassifierError::Manifest("bad class count".into()))?;
        let mut settings = Settings::default();
        for (k, v) in &entries {
            if let Some(key) = k.strip_prefix("config.") {
                settings.apply(key, v)?;
            }
        }
        let mut bundle = Self {
            class_ids: Vec::with_capacity(n),
            models: Vec::with_capacity(n),
            settings,
            class_log_prior: None,
        };
        for i in 0..n {
            let id = get(&format!("class.{i}"))?;
            let file = dir.join(get(&format!("file.{i}"))?);
            let bytes = fs::read(&file).map_err(|source| ClassifierError::Io {
                path: file.clone(),
                source,
            })?;
            let model = MixtureModel::from_bytes(&bytes).map_err(|source| ClassifierError::Persist { path: file, source })?;
            if let Some(d) = bundle.dim() {
                if model.dim() != d {
                    return Err(ClassifierError::DimMismatch {
                        expected: d,
                        got: model.dim(),
                    });
                }
            }
            if bundle.class_ids.contains(&id) {
                return Err(ClassifierError::Conflict(id));
            }
            bundle.class_ids.push(id);
            bundle.models.push(model);
        }
        if let Some(p) = entries.get("class_log_prior") {
            let prior = crate::persist::parse_f64_list(p).map_err(|e| ClassifierError::Manifest(e.to_string()))?;
            if prior.len() != n {
                return Err(ClassifierError::Manifest("class prior length".into()));
            }
            bundle.class_log_prior = Some(prior);
        }
        Ok(bundle)
    }
}

fn check_class_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\n', '\r']) {
        return Err(ClassifierError::BadClassId(id.to_string()));
    }
    Ok(())
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| ClassifierError::ThreadPool(e.to_string()))
}

fn train_class(
    id: &str,
    data: &Dataset,
    spec: &ModelSpec,
    config: &EmConfig,
    keep_snapshots: bool,
) -> Result<(MixtureModel, TrainingLog, Vec<MixtureModel>)> {
    let mut cfg = config.clone();
    cfg.seed = class_seed(config.seed, id);
    if data.len() < cfg.batch_size {
        log::warn!(
            "class {id:?} has {} samples, fewer than the batch size {}; using {}",
            data.len(),
            cfg.batch_size,
            data.len()
        );
        cfg.batch_size = data.len();
    }
    let mut snapshots = Vec::new();
    let result = mixture::fit_with(spec, data, &cfg, |_, m| {
        if keep_snapshots {
            snapshots.push(m.clone());
        }
    });
    match result {
        Ok((model, log)) => Ok((model, log, snapshots)),
        Err(f) => Err(ClassifierError::Training {
            class: id.to_string(),
            epoch: f.epoch,
            source: f.error,
        }),
    }
}
