//! ILRMA and the fast neural-model optimizer, sharing iterative-projection
//! demixing updates, the local-Gaussian likelihood, the closed-form gain
//! update and back-projection.

mod demix;
mod fmvae;
mod ilrma;
mod pipeline;
mod trace;

pub use demix::{neg_log_likelihood, update_gain, DemixingStack};
pub use fmvae::{fmvae_separate, FmvaeConfig, FmvaeOutput, StepCounts, DEFAULT_VARIANCE_FLOOR};
pub use ilrma::{ilrma_separate, IlrmaConfig, IlrmaOutput};
pub use pipeline::{separate, Method, PipelineConfig, PipelineOutput};
pub use trace::{IterationRecord, SeparationTrace, Timing};

use thiserror::Error;

use crate::linalg::LinalgError;
use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum SeparationError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("linear algebra failure at frequency bin {freq}: {source}")]
    Linalg { freq: usize, source: LinalgError },
    #[error("model has {found} classes, {expected} requested")]
    ClassMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}
