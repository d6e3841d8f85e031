//! Gradient oracles and router-gradient error analysis.
//!
//! The dense router gradient (every expert evaluated) is the reference.
//! Sparse Top-K drops the terms of non-selected experts; default mode
//! replaces them with the default vectors. Comparisons hold the Top-K
//! selection fixed across evaluations by replaying the recorded routing.

mod fd;
mod report;
mod router;
mod sweep;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::train::TrainError;

pub use fd::{
    finite_difference_check, model_gradcheck, relative_error, BlockCheck, FdOptions, FdResult,
    ModelGradcheck, Stencil, DEFAULT_FD_STEP,
};
pub use report::{GradReport, GradReportRow, GRAD_CSV_HEADER};
pub use router::{
    cosine_to_dense, dense_router_gradient, router_gradient_error, router_gradients,
    similarity_sweep, LayerGradComparison, RouterGradients,
};
pub use sweep::{gradsim_seed, GradsimPhase, GradsimSettings};

#[derive(Debug, Error)]
pub enum GradError {
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("layer {layer}: zero-norm router gradient, similarity undefined")]
    ZeroNorm { layer: usize },
    #[error("model state changed between evaluations: {0}")]
    StateDiverged(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] TrainError),
}

impl From<AnalysisError> for GradError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Train(t) => GradError::Model(t),
            other => GradError::NonFinite(other.to_string()),
        }
    }
}
