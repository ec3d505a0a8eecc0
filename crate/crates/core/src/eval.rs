//! Sample-quality and likelihood reports: Gaussian-kernel MMD², leave-one-out
//! 1-NN two-sample accuracy, and NLL-versus-K sweeps.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::em::TrainingLog;
use crate::error::ModelError;
use crate::mixture::FitResult;
use crate::persist::fmt_f64;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("sample sets have different dimensions ({a} vs {b})")]
    DimMismatch { a: usize, b: usize },
    #[error("need at least 2 samples per set, got {got}")]
    InsufficientSamples { got: usize },
    #[error("the list of K values is empty")]
    EmptyKList,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Default number of samples drawn per side for two-sample metrics.
pub const DEFAULT_SAMPLES_PER_SIDE: usize = 1000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(EvalError::DimMismatch { a: a.cols(), b: b.cols() });
    }
    let smallest = a.rows().min(b.rows());
    if smallest < 2 {
        return Err(EvalError::InsufficientSamples { got: smallest });
    }
    Ok(())
}

/// Order-independent sum: values are sorted before adding.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Median pairwise Euclidean distance over the pooled set.
pub fn median_distance(a: &Tensor, b: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let mut d: Vec<f64> = (0..pooled.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let pooled = &pooled;
            (i + 1..pooled.len()).map(move |j| sq_dist(pooled[i], pooled[j]))
        })
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let mid = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    mid.sqrt()
}

/// Unbiased MMD² and the bandwidth it used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mmd {
    pub mmd2: f64,
    pub bandwidth: f64,
    /// True when the median heuristic gave zero and `h = 1` was substituted.
    pub bandwidth_fallback: bool,
}

/// Unbiased MMD² with kernel `exp(-|a-b|² / (2h²))`. `h` defaults to the
/// median pairwise distance of the pooled samples.
///
/// The estimate is exactly symmetric in `a` and `b` and independent of row order.
pub fn mmd_gaussian(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<Mmd> {
    check_pair(a, b)?;
    let mut h = bandwidth.unwrap_or_else(|| median_distance(a, b));
    let fallback = !(h > 0.0) || !h.is_finite();
    if fallback {
        log::warn!("degenerate MMD bandwidth {h}; using 1");
        h = 1.0;
    }
    let gamma = 1.0 / (2.0 * h * h);
    let kernel = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let within = |t: &Tensor| -> f64 {
        let n = t.rows();
        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| (i + 1..n).map(move |j| kernel(t.row(i), t.row(j))))
            .collect();
        2.0 * stable_sum(values) / (n as f64 * (n as f64 - 1.0))
    };
    let cross: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .flat_map_iter(|i| (0..b.rows()).map(move |j| kernel(a.row(i), b.row(j))))
        .collect();
    let cross = stable_sum(cross) / (a.rows() as f64 * b.rows() as f64);
    let mmd2 = within(a) + within(b) - 2.0 * cross;
    Ok(Mmd {
        mmd2,
        bandwidth: h,
        bandwidth_fallback: fallback,
    })
}

/// Rows of `t` kept when equalising set sizes: all of them, or a seeded subset in original order.
fn subsample(t: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    if t.rows() == size {
        return t.clone();
    }
    let mut keep = index::sample(rng, t.rows(), size).into_vec();
    keep.sort_unstable();
    t.select_rows(&keep)
}

/// Leave-one-out 1-NN accuracy at telling `a` from `b` after subsampling the
/// larger set to the size of the smaller. Ties go to the lowest pooled index.
pub fn one_nn_two_sample(a: &Tensor, b: &Tensor, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.rows().min(b.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = subsample(a, n, &mut rng);
    let b = subsample(b, n, &mut rng);
    let row = |i: usize| if i < n { a.row(i) } else { b.row(i - n) };
    let correct: usize = (0..2 * n)
        .into_par_iter()
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for j in 0..2 * n {
                if j == i {
                    continue;
                }
                let d = sq_dist(row(i), row(j));
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            usize::from((best < n) == (i < n))
        })
        .sum();
    Ok(correct as f64 / (2 * n) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoSampleReport {
    pub mmd2: f64,
    pub onenn_accuracy: f64,
    pub size_a: usize,
    pub size_b: usize,
    pub bandwidth: f64,
    pub bandwidth_fallback: bool,
    pub seed: u64,
}

impl TwoSampleReport {
    pub fn compute(a: &Tensor, b: &Tensor, bandwidth: Option<f64>, seed: u64) -> Result<Self> {
        let mmd = mmd_gaussian(a, b, bandwidth)?;
        let onenn_accuracy = one_nn_two_sample(a, b, seed)?;
        Ok(Self {
            mmd2: mmd.mmd2,
            onenn_accuracy,
            size_a: a.rows(),
            size_b: b.rows(),
            bandwidth: mmd.bandwidth,
            bandwidth_fallback: mmd.bandwidth_fallback,
            seed,
        })
    }

    /// CSV with a `# key=value` comment header.
    pub fn to_csv(&self, extra_comments: &[String]) -> String {
        let mut out = String::new();
        for line in report_header(extra_comments) {
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str(&format!("# seed={}\n", self.seed));
        out.push_str(&format!("# bandwidth={}\n", fmt_f64(self.bandwidth)));
        out.push_str(&format!("# bandwidth_fallback={}\n", self.bandwidth_fallback));
        out.push_str(&format!("# size_a={}\n# size_b={}\n", self.size_a, self.size_b));
        out.push_str("mmd2,onenn_accuracy\n");
        out.push_str(&format!("{},{}\n", fmt_f64(self.mmd2), fmt_f64(self.onenn_accuracy)));
        out
    }
}

/// Comment lines shared by every metric report.
pub fn report_header(extra: &[String]) -> Vec<String> {
    let mut lines = vec![
        "# features=raw sample vectors (no pretrained feature extractor; IS/FID not computed)".to_string(),
        "# mmd_estimator=unbiased (may be negative)".to_string(),
    ];
    lines.extend(extra.iter().map(|l| format!("# {l}")));
    lines
}

/// Outcome of training one model in an NLL-versus-K sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum KOutcome {
    Trained { log: TrainingLog, held_out_nll: f64 },
    Failed { epoch: usize, message: String, log: TrainingLog },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllVsKReport {
    pub rows: Vec<(usize, KOutcome)>,
}

impl NllVsKReport {
    /// Final held-out NLL per K; `None` where training failed.
    pub fn held_out(&self) -> Vec<(usize, Option<f64>)> {
        self.rows
            .iter()
            .map(|(k, o)| match o {
                KOutcome::Trained { held_out_nll, .. } => (*k, Some(*held_out_nll)),
                KOutcome::Failed { .. } => (*k, None),
            })
            .collect()
    }

    /// True when every K trained and the held-out NLL falls strictly with K (in list order).
    pub fn strictly_decreasing(&self) -> bool {
        let values: Option<Vec<f64>> = self.held_out().into_iter().map(|(_, v)| v).collect();
        values.is_some_and(|v| v.windows(2).all(|w| w[1] < w[0]))
    }

    /// Long-format CSV: one row per K and epoch; the held-out NLL sits on each
    /// K's last row, and failed runs carry their error message.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("k,epoch,train_nll_nat_per_dim,held_out_nll_nat_per_dim,error\n");
        for (k, outcome) in &self.rows {
            match outcome {
                KOutcome::Trained { log, held_out_nll } => {
                    let last = log.records.len();
                    for r in &log.records {
                        let held = if r.epoch == last { fmt_f64(*held_out_nll) } else { String::new() };
                        out.push_str(&format!("{k},{},{},{held},\n", r.epoch, fmt_f64(r.nll_per_dim)));
                    }
                }
                KOutcome::Failed { epoch, message, log } => {
                    for r in &log.records {
                        out.push_str(&format!("{k},{},{},,\n", r.epoch, fmt_f64(r.nll_per_dim)));
                    }
                    let message = message.replace([',', '\n'], ";");
                    out.push_str(&format!("{k},{epoch},,,{message}\n"));
                }
            }
        }
        out
    }
}

/// Trains one model per K with `trainer` and scores it on `held_out`.
/// A failure for one K is recorded and the sweep continues.
pub fn nll_vs_k(
    ks: &[usize],
    train: &Dataset,
    held_out: &Dataset,
    mut trainer: impl FnMut(usize, &Dataset) -> FitResult,
) -> Result<NllVsKReport> {
    if ks.is_empty() {
        return Err(EvalError::EmptyKList);
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let outcome = match trainer(k, train) {
            Ok((model, log)) => match model.evaluate_nll(held_out) {
                Ok(held_out_nll) => KOutcome::Trained { log, held_out_nll },
                Err(e) => KOutcome::Failed {
                    epoch: log.records.len(),
                    message: e.to_string(),
                    log,
                },
            },
            Err(f) => KOutcome::Failed {
                epoch: f.epoch,
                message: f.error.to_string(),
                log: f.log,
            },
        };
        if let KOutcome::Failed { message, .. } = &outcome {
            log::warn!("K={k}: {message}");
        }
        rows.push((k, outcome));
    }
    Ok(NllVsKReport { rows })
}
