use thiserror::Error;

use crate::autodiff::AutodiffError;

/// Errors raised while evaluating or training flow and mixture models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("numerical overflow in {0} (scale clamp too loose or learning rate too high)")]
    NumericalOverflow(&'static str),
    #[error("degenerate coupling scale")]
    DegenerateScale,
    #[error("sample {index} has zero density under every component")]
    DegenerateSample { index: usize },
    #[error("component {k}: {source}")]
    Component {
        k: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Autodiff(AutodiffError),
}

impl ModelError {
    pub fn in_component(self, k: usize) -> Self {
        ModelError::Component {
            k,
            source: Box::new(self),
        }
    }

    /// True for failures caused by non-finite or degenerate arithmetic.
    pub fn is_numerical(&self) -> bool {
        match self {
            ModelError::NumericalOverflow(_)
            | ModelError::DegenerateScale
            | ModelError::DegenerateSample { .. } => true,
            ModelError::Component { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite(op) => ModelError::NumericalOverflow(op),
            AutodiffError::DegenerateScale => ModelError::DegenerateScale,
            other => ModelError::Autodiff(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
