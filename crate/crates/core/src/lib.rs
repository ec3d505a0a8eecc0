//! Explicit neural mixture models built from invertible flows.
//!
//! [`genmm::GenMM`] mixes `K` independent flows; [`latmm::LatMM`] puts a
//! Gaussian mixture in the latent space of one shared flow. Both are trained
//! by batched EM ([`em::run_em`]) on top of a small reverse-mode autodiff
//! engine ([`autodiff`]).

pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod em;
pub mod error;
pub mod eval;
pub mod flow;
pub mod genmm;
pub mod init;
pub mod latmm;
pub mod mixture;
pub mod persist;
pub mod settings;

pub use autodiff::{Graph, Tensor, Var};
pub use data::Dataset;
pub use em::{EmConfig, TrainingLog};
pub use error::{ModelError, Result};
pub use flow::{FlowConfig, FlowNetwork};
pub use genmm::GenMM;
pub use latmm::{LatMM, RegularizerSpec};
pub use mixture::{MixtureModel, ModelKind, ModelSpec};
pub use settings::Settings;
