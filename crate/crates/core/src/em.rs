//! Batched EM driver shared by GenMM and LatMM.
//!
//! Both trainers keep two copies of the model: the live one receives
//! gradient steps on the M-step objective while a frozen `old` copy supplies
//! the responsibilities. At the end of every `em_gap`-th epoch the old copy
//! is refreshed; at the end of every `prior_gap`-th epoch the mixing weights
//! become the epoch average of the responsibilities.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_sum_exp, Tensor};
use crate::data::Dataset;
use crate::error::{ModelError, Result};

/// Components whose weight drops below this are frozen.
pub const FROZEN_PI: f64 = 1e-6;

/// Rows per chunk when scoring a whole dataset.
pub(crate) const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimScaling {
    /// On for data with more than 16 dimensions.
    Auto,
    On,
    Off,
}

impl DimScaling {
    pub fn resolve(self, dim: usize) -> bool {
        match self {
            DimScaling::Auto => dim > 16,
            DimScaling::On => true,
            DimScaling::Off => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DimScaling::Auto => "auto",
            DimScaling::On => "on",
            DimScaling::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// `θ ← θ + η ∇`, as in the EM algorithms.
    Gradient,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Gradient => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// How a model is initialised before training by the `fit` helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Flows start at (near) identity.
    Identity,
    /// The input actnorm of each flow is fitted to the data first.
    DataDependent,
}

impl InitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Identity => "identity",
            InitStrategy::DataDependent => "data",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs between refreshes of the frozen model.
    pub em_gap: usize,
    /// Epochs between prior (mixing weight) updates.
    pub prior_gap: usize,
    pub dim_scaling: DimScaling,
    pub optimizer: OptimizerKind,
    pub init: InitStrategy,
    pub seed: u64,
    /// Fill the `wall_seconds` column; off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-2,
            em_gap: 5,
            prior_gap: 5,
            dim_scaling: DimScaling::Auto,
            optimizer: OptimizerKind::Gradient,
            init: InitStrategy::DataDependent,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.em_gap < 1 || self.prior_gap < 1 {
            return bad("EM and prior update gaps must be at least 1");
        }
        Ok(())
    }
}

/// Posterior component probabilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    gamma: Tensor,
}

impl Responsibilities {
    /// Normalises `log π_k + scale · ℓ_ik` over `k` in the log domain.
    ///
    /// Components with `π_k < FROZEN_PI` get zero responsibility.
    pub fn from_log_likelihoods(loglik: &Tensor, pi: &[f64], scale: f64) -> Result<Self> {
        let (n, k) = (loglik.rows(), loglik.cols());
        if k != pi.len() {
            return Err(ModelError::DimMismatch {
                expected: pi.len(),
                got: k,
            });
        }
        let log_pi: Vec<f64> = pi
            .iter()
            .map(|&p| if p < FROZEN_PI { f64::NEG_INFINITY } else { p.ln() })
            .collect();
        let mut gamma = Tensor::zeros(&[n, k]);
        let mut a = vec![0.0; k];
        for i in 0..n {
            for (j, slot) in a.iter_mut().enumerate() {
                *slot = if log_pi[j].is_finite() {
                    log_pi[j] + scale * loglik.get(i, j)
                } else {
                    f64::NEG_INFINITY
                };
            }
            let lse = log_sum_exp(&a);
            if !lse.is_finite() {
                return Err(ModelError::DegenerateSample { index: i });
            }
            for (j, &aj) in a.iter().enumerate() {
                gamma.set(i, j, (aj - lse).exp());
            }
        }
        Ok(Self { gamma })
    }

    /// Wraps a matrix already known to hold valid posterior rows.
    pub fn from_matrix(gamma: Tensor) -> Result<Self> {
        for i in 0..gamma.rows() {
            let row = gamma.row(i);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
                return Err(ModelError::InvalidModel(format!(
                    "responsibility row {i} is not a probability vector"
                )));
            }
        }
        Ok(Self { gamma })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.gamma.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.gamma.row(i)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.gamma.column(k)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.k()];
        for i in 0..self.len() {
            for (acc, g) in s.iter_mut().zip(self.row(i)) {
                *acc += g;
            }
        }
        s
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    /// Most responsible component of sample `i`; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> usize {
        argmax_first(self.row(i))
    }
}

/// Index of the maximum; the first one wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// New mixing weights from averaged responsibilities, renormalised onto the simplex.
pub fn prior_from_mean_gamma(mean_gamma: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = mean_gamma.iter().map(|g| g.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        let k = mean_gamma.len() as f64;
        return vec![1.0 / k; mean_gamma.len()];
    }
    clipped.into_iter().map(|g| g / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub nll_per_dim: f64,
    pub pi: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_nll(&self) -> Option<f64> {
        self.records.last().map(|r| r.nll_per_dim)
    }

    pub fn nll_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.nll_per_dim).collect()
    }

    /// `epoch,nll_nat_per_dim,pi_1..pi_K,wall_seconds`, preceded by `# ` comment lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        let k = self.records.first().map_or(0, |r| r.pi.len());
        out.push_str("epoch,nll_nat_per_dim");
        for j in 1..=k {
            let _ = write!(out, ",pi_{j}");
        }
        out.push_str(",wall_seconds\n");
        for r in &self.records {
            let _ = write!(out, "{},{:?}", r.epoch, r.nll_per_dim);
            for p in &r.pi {
                let _ = write!(out, ",{p:?}");
            }
            let _ = writeln!(out, ",{:?}", r.wall_seconds);
        }
        out
    }
}

/// Training aborted on a numerical failure; `checkpoint` is the model as it
/// stood at the start of the failing epoch.
#[derive(Debug, Clone)]
pub struct TrainFailure<M> {
    pub epoch: usize,
    pub error: ModelError,
    pub checkpoint: M,
    pub log: TrainingLog,
}

impl<M> std::fmt::Display for TrainFailure<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted in epoch {}: {}", self.epoch, self.error)
    }
}

impl<M: std::fmt::Debug> std::error::Error for TrainFailure<M> {}

/// First-order optimiser state, keyed by a stable parameter slot index.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Marks the start of one model-wide update.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Moves `param` uphill along `grad` (gradient of the objective being maximised).
    pub fn ascend(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.numel(), grad.numel());
        match self.kind {
            OptimizerKind::Gradient => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p += self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.moments.len() <= slot {
                    self.moments.resize(slot + 1, None);
                }
                let n = param.numel();
                let (m, v) = self.moments[slot].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - Self::BETA1.powi(t);
                let c2 = 1.0 - Self::BETA2.powi(t);
                for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                    *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * g;
                    *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * g * g;
                    *p += self.lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Model-specific hooks used by [`run_em`].
pub trait EmModel: Clone {
    fn dim(&self) -> usize;
    fn pi(&self) -> &[f64];
    fn set_pi(&mut self, pi: Vec<f64>);
    /// E-step on a batch, evaluated with this (old) model.
    fn batch_responsibilities(&self, x: &Tensor, dim_scaling: bool) -> Result<Responsibilities>;
    /// One ascent step on `(1/n_b) Q` (plus any regulariser) with `gamma` held fixed.
    fn m_step(&mut self, x: &Tensor, gamma: &Responsibilities, opt: &mut Optimizer) -> Result<()>;
    /// Mixture log-density of each row.
    fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>>;
}

/// Mean negative log-likelihood in nats per dimension.
pub fn nll_per_dim<M: EmModel>(model: &M, data: &Tensor) -> Result<f64> {
    let n = data.rows();
    if n == 0 {
        return Err(ModelError::InvalidConfig("cannot score an empty dataset".into()));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = data.select_rows(chunk);
        total += model.log_likelihood(&x)?.iter().sum::<f64>();
    }
    let nll = -total / (n as f64 * model.dim() as f64);
    if !nll.is_finite() {
        return Err(ModelError::NumericalOverflow("dataset log-likelihood"));
    }
    Ok(nll)
}

/// Seeded per-epoch shuffling into batches; the last partial batch is kept.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Index batches for the next epoch.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Seed stream for batch order, kept apart from model initialisation.
pub(crate) fn batch_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Runs the batched EM loop, calling `on_epoch` after each epoch.
pub fn run_em<M: EmModel>(
    model: &mut M,
    data: &Dataset,
    config: &EmConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &M),
) -> std::result::Result<TrainingLog, TrainFailure<M>> {
    let fail = |epoch: usize, error: ModelError, checkpoint: &M, log: &TrainingLog| TrainFailure {
        epoch,
        error,
        checkpoint: checkpoint.clone(),
        log: log.clone(),
    };
    let mut log = TrainingLog::default();
    if let Err(e) = config.validate() {
        return Err(fail(0, e, model, &log));
    }
    let x_all = &data.samples;
    if x_all.rows() == 0 {
        return Err(fail(0, ModelError::InvalidConfig("dataset is empty".into()), model, &log));
    }
    if x_all.cols() != model.dim() {
        let e = ModelError::DimMismatch {
            expected: model.dim(),
            got: x_all.cols(),
        };
        return Err(fail(0, e, model, &log));
    }
    let scaling = config.dim_scaling.resolve(model.dim());
    let mut batches = BatchIterator::new(x_all.rows(), config.batch_size, batch_seed(config.seed));
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut old = model.clone();
    let start = Instant::now();

    for t in 0..config.epochs {
        let checkpoint = model.clone();
        let mut gamma_sums = vec![0.0; model.pi().len()];
        let mut seen = 0usize;
        for batch in batches.next_epoch() {
            let x = x_all.select_rows(&batch);
            let step = old
                .batch_responsibilities(&x, scaling)
                .and_then(|gamma| {
                    for (acc, s) in gamma_sums.iter_mut().zip(gamma.column_sums()) {
                        *acc += s;
                    }
                    opt.begin_step();
                    model.m_step(&x, &gamma, &mut opt)
                });
            if let Err(e) = step {
                *model = checkpoint.clone();
                return Err(fail(t + 1, e, &checkpoint, &log));
            }
            seen += batch.len();
        }
        if t % config.prior_gap == 0 {
            let mean: Vec<f64> = gamma_sums.iter().map(|s| s / seen as f64).collect();
            model.set_pi(prior_from_mean_gamma(&mean));
        }
        if t % config.em_gap == 0 {
            old = model.clone();
        }
        let nll = match nll_per_dim(model, x_all) {
            Ok(v) => v,
            Err(e) => {
                *model = checkpoint.clone();
                return Err(fail(t + 1, e, &checkpoint, &log));
            }
        };
        let record = EpochRecord {
            epoch: t + 1,
            nll_per_dim: nll,
            pi: model.pi().to_vec(),
            wall_seconds: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!("epoch {}/{}: nll {:.6} nat/dim", record.epoch, config.epochs, record.nll_per_dim);
        on_epoch(&record, model);
        log.records.push(record);
    }
    Ok(log)
}
