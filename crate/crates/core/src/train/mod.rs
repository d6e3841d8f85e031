//! Character-level language model, training loop and run comparison.

mod checkpoint;
mod compare;
mod config;
mod data;
mod metrics;
mod model;
mod optim;
mod trainer;

use thiserror::Error;

use crate::moe::MoeError;
use crate::tensor::TensorError;

pub use checkpoint::{
    checkpoint_header, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use compare::{
    compare_runs, steps_to_target, throughput_bench, Comparison, ModeSummary, RunResult,
    SeedComparison, ThroughputResult,
};
pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use data::{eval_windows, load_corpus, sample_batch, Batch, Corpus};
pub use metrics::{MetricsRecord, MetricsWriter, CSV_HEADER};
pub use model::{Block, Ffn, LanguageModel, LossParts, ModelForwardOptions, ModelOutput};
pub use optim::{clip_global_norm, global_norm, learning_rate, AdamW};
pub use trainer::{evaluate, EvalResult, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("corpus alphabet has {found} symbols, model vocabulary holds {limit}")]
    VocabOverflow { found: usize, limit: usize },
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("non-finite loss at step {step}\n{diagnostics}")]
    NonFinite { step: u64, diagnostics: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Whether this came from a NaN or infinity rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Moe(MoeError::NonFinite(_))
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Moe(MoeError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}
