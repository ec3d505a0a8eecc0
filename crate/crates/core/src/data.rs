//! Dataset ingestion: CSV tables, IDX image files and synthetic mixtures.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
    #[error("line {line}, column {col}: cannot parse {value:?} as a number")]
    Parse { line: u64, col: usize, value: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bad IDX file: {0}")]
    Idx(String),
    #[error("images and labels disagree: {0}")]
    Consistency(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A matrix of samples with optional integer labels and provenance notes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
    /// Label names in encoding order; `labels[i]` indexes this list.
    pub label_names: Vec<String>,
    pub name: String,
    pub preprocessing: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Option<Vec<usize>>, label_names: Vec<String>, name: &str) -> Result<Self> {
        let ds = Self {
            samples,
            labels,
            label_names,
            name: name.to_string(),
            preprocessing: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn unlabeled(samples: Tensor, name: &str) -> Result<Self> {
        Self::new(samples, None, Vec::new(), name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.shape().len() != 2 {
            return Err(DataError::Invalid("samples must be a matrix".into()));
        }
        if !self.samples.all_finite() {
            return Err(DataError::Invalid("non-finite sample value".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(DataError::Invalid(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.label_names.len()) {
                return Err(DataError::Invalid(format!("label {bad} has no name")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            label_names: self.label_names.clone(),
            name: self.name.clone(),
            preprocessing: self.preprocessing.clone(),
        }
    }

    /// Seeded shuffle into `(train, test)` with `round(n · train_fraction)` training rows.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.min(self.len());
        (self.subset(&order[..cut]), self.subset(&order[cut..]))
    }

    /// Rows carrying label `label`.
    pub fn class_subset(&self, label: usize) -> Dataset {
        let idx: Vec<usize> = match &self.labels {
            Some(l) => (0..self.len()).filter(|&i| l[i] == label).collect(),
            None => Vec::new(),
        };
        self.subset(&idx)
    }
}

/// Where the label lives in a CSV row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CsvOptions {
    pub label_column: Option<LabelColumn>,
    /// Pre-existing label encoding (e.g. from a training set); new labels are appended.
    pub known_labels: Vec<String>,
}

/// Loads a comma-separated table. A first row containing a non-numeric
/// feature cell is treated as a header.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    parse_csv(&text, options, &name)
}

pub fn parse_csv(text: &str, options: &CsvOptions, name: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows: Vec<(u64, Vec<String>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Format {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let width = rows[0].1.len();
    let mut header: Option<Vec<String>> = None;
    let label_idx_hint = match &options.label_column {
        Some(LabelColumn::Index(i)) => Some(*i),
        _ => None,
    };
    let first_is_header = rows[0]
        .1
        .iter()
        .enumerate()
        .any(|(j, cell)| Some(j) != label_idx_hint && cell.parse::<f64>().is_err())
        || matches!(options.label_column, Some(LabelColumn::Name(_)));
    if first_is_header {
        header = Some(rows.remove(0).1);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let label_col = match &options.label_column {
        None => None,
        Some(LabelColumn::Index(i)) => {
            if *i >= width {
                return Err(DataError::Invalid(format!("label column {i} out of range (width {width})")));
            }
            Some(*i)
        }
        Some(LabelColumn::Name(n)) => Some(
            header
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == n))
                .ok_or_else(|| DataError::Invalid(format!("no column named {n:?}")))?,
        ),
    };
    let dim = width - usize::from(label_col.is_some());
    let mut data = Vec::with_capacity(rows.len() * dim);
    let mut names = options.known_labels.clone();
    let mut codes: HashMap<String, usize> = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
    let mut labels = label_col.map(|_| Vec::with_capacity(rows.len()));
    for (line, cells) in &rows {
        if cells.len() != width {
            return Err(DataError::Format {
                line: *line,
                message: format!("expected {width} fields, found {}", cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            if Some(j) == label_col {
                let code = *codes.entry(cell.clone()).or_insert_with(|| {
                    names.push(cell.clone());
                    names.len() - 1
                });
                labels.as_mut().expect("label vector").push(code);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    line: *line,
                    col: j + 1,
                    value: cell.clone(),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Parse {
                        line: *line,
                        col: j + 1,
                        value: cell.clone(),
                    });
                }
                data.push(v);
            }
        }
    }
    let samples = Tensor::matrix(rows.len(), dim, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let names = if labels.is_some() { names } else { Vec::new() };
    Dataset::new(samples, labels, names, name)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdxOptions {
    /// Mean-pool images down to `(rows, cols)`; the source sides must be multiples.
    pub target_grid: Option<(usize, usize)>,
}

/// Loads IDX image (and optional label) files, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: Option<&Path>, options: IdxOptions) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DataError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let img = read(images)?;
    let lab = labels.map(read).transpose()?;
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    parse_idx(&img, lab.as_deref(), options, &name)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Idx("truncated header".into()))
}

pub fn parse_idx(images: &[u8], labels: Option<&[u8]>, options: IdxOptions, name: &str) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(DataError::Idx(format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(images, 4)? as usize;
    let h = be_u32(images, 8)? as usize;
    let w = be_u32(images, 12)? as usize;
    let pixels = &images[16..];
    if pixels.len() != n * h * w {
        return Err(DataError::Idx(format!(
            "expected {} pixel bytes, found {}",
            n * h * w,
            pixels.len()
        )));
    }
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let (oh, ow) = options.target_grid.unwrap_or((h, w));
    if oh == 0 || ow == 0 || !h.is_multiple_of(oh) || !w.is_multiple_of(ow) {
        return Err(DataError::Invalid(format!("cannot pool {h}x{w} down to {oh}x{ow}")));
    }
    let (ph, pw) = (h / oh, w / ow);
    let norm = 255.0 * (ph * pw) as f64;
    let mut data = Vec::with_capacity(n * oh * ow);
    for img in pixels.chunks_exact(h * w) {
        for by in 0..oh {
            for bx in 0..ow {
                let mut s = 0u32;
                for y in by * ph..(by + 1) * ph {
                    for x in bx * pw..(bx + 1) * pw {
                        s += u32::from(img[y * w + x]);
                    }
                }
                data.push(f64::from(s) / norm);
            }
        }
    }
    let samples = Tensor::matrix(n, oh * ow, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let (labels, names) = match labels {
        None => (None, Vec::new()),
        Some(bytes) => {
            let magic = be_u32(bytes, 0)?;
            if magic != IDX_LABELS {
                return Err(DataError::Idx(format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
            }
            let count = be_u32(bytes, 4)? as usize;
            let body = &bytes[8..];
            if body.len() != count {
                return Err(DataError::Idx(format!("expected {count} label bytes, found {}", body.len())));
            }
            if count != n {
                return Err(DataError::Consistency(format!("{n} images but {count} labels")));
            }
            let max = body.iter().copied().max().unwrap_or(0) as usize;
            let names = (0..=max).map(|v| v.to_string()).collect();
            (Some(body.iter().map(|&b| b as usize).collect()), names)
        }
    };
    let mut ds = Dataset::new(samples, labels, names, name)?;
    if options.target_grid.is_some() {
        ds.preprocessing.push(format!("meanpool {h}x{w}->{oh}x{ow}"));
    }
    Ok(ds)
}

/// Serialises images and labels in IDX format (test fixtures, exports).
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// One isotropic Gaussian mode of a synthetic mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

/// `count` equally weighted 2-D modes evenly spaced on a circle.
pub fn ring_modes(count: usize, radius: f64, std: f64) -> Vec<Mode> {
    (0..count)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            Mode {
                mean: vec![radius * a.cos(), radius * a.sin()],
                std,
                weight: 1.0 / count as f64,
            }
        })
        .collect()
}

/// Draws `n` labelled samples; the label is the mode index.
pub fn synth_multimodal(modes: &[Mode], n: usize, seed: u64) -> Result<Dataset> {
    let first = modes.first().ok_or_else(|| DataError::Invalid("no modes".into()))?;
    let dim = first.mean.len();
    if modes.iter().any(|m| m.mean.len() != dim || m.std < 0.0 || m.weight < 0.0) {
        return Err(DataError::Invalid("modes need equal dimension and non-negative std/weight".into()));
    }
    let total: f64 = modes.iter().map(|m| m.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("mode weights sum to {total}, not 1")));
    }
    let pick = WeightedIndex::new(modes.iter().map(|m| m.weight))
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = if modes.len() == 1 { 0 } else { pick.sample(&mut rng) };
        let m = &modes[k];
        for &mu in &m.mean {
            let e: f64 = rng.sample(StandardNormal);
            data.push(mu + m.std * e);
        }
        labels.push(k);
    }
    let samples = Tensor::matrix(n, dim, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let names = (0..modes.len()).map(|k| k.to_string()).collect();
    let mut ds = Dataset::new(samples, Some(labels), names, "synthetic")?;
    ds.preprocessing.push(format!("synthetic modes={} seed={seed}", modes.len()));
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preprocess {
    None,
    /// Per-feature zero mean, unit variance.
    Standardize,
    /// Adds `U[0, scale)` noise to every value.
    Dequantize { scale: f64, seed: u64 },
}

/// Per-feature statistics applied by [`Preprocess::Standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(samples: &Tensor) -> (Self, Vec<usize>) {
        let (n, d) = (samples.rows(), samples.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(samples.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut degenerate = Vec::new();
        let std = var
            .into_iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd == 0.0 {
                    degenerate.push(j);
                }
                sd + if sd == 0.0 { 1e-8 } else { 0.0 }
            })
            .collect();
        (Self { mean, std }, degenerate)
    }

    pub fn apply(&self, samples: &Tensor) -> Tensor {
        let mut out = samples.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, samples: &Tensor) -> Tensor {
        let mut out = samples.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

/// Applies `spec`, returning the new dataset and any standardisation statistics.
pub fn preprocess(dataset: &Dataset, spec: Preprocess) -> (Dataset, Option<Standardization>) {
    let mut out = dataset.clone();
    match spec {
        Preprocess::None => (out, None),
        Preprocess::Standardize => {
            let (stats, degenerate) = Standardization::fit(&dataset.samples);
            out.samples = stats.apply(&dataset.samples);
            out.preprocessing.push("standardize".into());
            for j in degenerate {
                log::warn!("feature {j} has zero variance; std padded with 1e-8");
                out.preprocessing.push(format!("warning: zero-variance feature {j} padded with 1e-8"));
            }
            (out, Some(stats))
        }
        Preprocess::Dequantize { scale, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in out.samples.data_mut() {
                *v += scale * rng.random::<f64>();
            }
            out.preprocessing.push(format!("dequantize scale={scale} seed={seed}"));
            (out, None)
        }
    }
}
