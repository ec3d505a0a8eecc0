//! A trained model of either kind, for code that only scores and samples.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::em::{self, EmConfig, TrainFailure, TrainingLog};
use crate::error::{ModelError, Result};
use crate::flow::FlowConfig;
use crate::genmm::{self, GenMM, Selection};
use crate::latmm::{self, LatMM, RegularizerSpec};
use crate::persist::{self, Manifest, PersistError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    GenMM,
    LatMM,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::GenMM => "genmm",
            ModelKind::LatMM => "latmm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "genmm" => Some(ModelKind::GenMM),
            "latmm" => Some(ModelKind::LatMM),
            _ => None,
        }
    }
}

/// Everything needed to build and train a model from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub k: usize,
    pub flow: FlowConfig,
    pub regularizer: RegularizerSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixtureModel {
    GenMM(GenMM),
    LatMM(LatMM),
}

impl MixtureModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            MixtureModel::GenMM(_) => ModelKind::GenMM,
            MixtureModel::LatMM(_) => ModelKind::LatMM,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            MixtureModel::GenMM(m) => m.k(),
            MixtureModel::LatMM(m) => m.k(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MixtureModel::GenMM(m) => m.dim(),
            MixtureModel::LatMM(m) => m.dim(),
        }
    }

    pub fn pi(&self) -> &[f64] {
        match self {
            MixtureModel::GenMM(m) => m.pi(),
            MixtureModel::LatMM(m) => m.pi(),
        }
    }

    pub fn meta(&self) -> &[(String, String)] {
        match self {
            MixtureModel::GenMM(m) => &m.meta,
            MixtureModel::LatMM(m) => &m.meta,
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta().iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Adds or replaces a free-form provenance entry stored with the model.
    pub fn set_meta(&mut self, key: &str, value: &str) {
        let meta = match self {
            MixtureModel::GenMM(m) => &mut m.meta,
            MixtureModel::LatMM(m) => &mut m.meta,
        };
        genmm::set_meta(meta, key, value);
    }

    pub fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        match self {
            MixtureModel::GenMM(m) => m.log_likelihood(x),
            MixtureModel::LatMM(m) => m.log_likelihood(x),
        }
    }

    /// Mean negative log-likelihood in nats per dimension.
    pub fn evaluate_nll(&self, data: &Dataset) -> Result<f64> {
        if data.dim() != self.dim() {
            return Err(ModelError::DimMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        match self {
            MixtureModel::GenMM(m) => em::nll_per_dim(m, &data.samples),
            MixtureModel::LatMM(m) => em::nll_per_dim(m, &data.samples),
        }
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        match self {
            MixtureModel::GenMM(m) => m.sample(count, rng),
            MixtureModel::LatMM(m) => m.sample(count, rng),
        }
    }

    /// `selection` only matters for GenMM, whose endpoints may use different generators.
    pub fn interpolate(
        &self,
        x_start: &[f64],
        x_end: &[f64],
        steps: usize,
        selection: Selection,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        match self {
            MixtureModel::GenMM(m) => m.interpolate(x_start, x_end, steps, selection, rng),
            MixtureModel::LatMM(m) => m.interpolate(x_start, x_end, steps),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            MixtureModel::GenMM(m) => m.to_bytes(),
            MixtureModel::LatMM(m) => m.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> persist::Result<Self> {
        let (lines, _) = persist::read_header(bytes)?;
        match Manifest::from_lines(&lines)?.get("kind")? {
            "genmm" => Ok(MixtureModel::GenMM(GenMM::from_bytes(bytes)?)),
            "latmm" => Ok(MixtureModel::LatMM(LatMM::from_bytes(bytes)?)),
            other => Err(PersistError::Manifest(format!("unknown model kind {other:?}"))),
        }
    }
}

/// The untrained model [`fit`] starts from.
pub fn initialize(spec: &ModelSpec, data: &Dataset, config: &EmConfig) -> Result<MixtureModel> {
    Ok(match spec.kind {
        ModelKind::GenMM => MixtureModel::GenMM(genmm::initialize(spec.k, &spec.flow, data, config)?),
        ModelKind::LatMM => MixtureModel::LatMM(latmm::initialize(spec.k, &spec.flow, spec.regularizer, data, config)?),
    })
}

/// Outcome of [`fit`]: on failure the last good model is kept.
pub type FitResult = std::result::Result<(MixtureModel, TrainingLog), TrainFailure<MixtureModel>>;

fn wrap<M>(r: std::result::Result<(M, TrainingLog), TrainFailure<M>>, f: fn(M) -> MixtureModel) -> FitResult {
    match r {
        Ok((m, log)) => Ok((f(m), log)),
        Err(e) => Err(TrainFailure {
            epoch: e.epoch,
            error: e.error,
            checkpoint: f(e.checkpoint),
            log: e.log,
        }),
    }
}

/// Builds and trains a model described by `spec`.
pub fn fit(spec: &ModelSpec, data: &Dataset, config: &EmConfig) -> FitResult {
    fit_with(spec, data, config, |_, _| {})
}

/// [`fit`] with a per-epoch callback that sees the current model.
pub fn fit_with(
    spec: &ModelSpec,
    data: &Dataset,
    config: &EmConfig,
    mut on_epoch: impl FnMut(&em::EpochRecord, &MixtureModel),
) -> FitResult {
    match spec.kind {
        ModelKind::GenMM => wrap(
            genmm::fit_with(spec.k, &spec.flow, data, config, |r, m| {
                on_epoch(r, &MixtureModel::GenMM(m.clone()))
            }),
            MixtureModel::GenMM,
        ),
        ModelKind::LatMM => wrap(
            latmm::fit_with(spec.k, &spec.flow, spec.regularizer, data, config, |r, m| {
                on_epoch(r, &MixtureModel::LatMM(m.clone()))
            }),
            MixtureModel::LatMM,
        ),
    }
}
