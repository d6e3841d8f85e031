use std::sync::Arc;

use serde::Serialize;

use super::{similarity_sweep, GradError, GradReport};
use crate::moe::{EmaPolicy, RoutingMode};
use crate::tensor::Scalar;
use crate::train::{sample_batch, Corpus, ModelForwardOptions, RunConfig, Trainer};

const ANALYSIS_STREAM_KEY: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, PartialEq)]
pub struct GradsimSettings {
    /// Modes compared against the dense gradient.
    pub modes: Vec<RoutingMode>,
    pub ks: Vec<usize>,
    /// Default-mode training steps before the trained-phase measurement;
    /// 0 skips that phase.
    pub warmup_steps: u64,
    /// Training batches folded into the default vectors, without any
    /// parameter update, before the init-phase measurement.
    pub absorb_batches: u64,
    /// Analysis batches per phase.
    pub batches: usize,
    /// Sequences per analysis batch.
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradsimPhase {
    Init,
    Trained,
}

impl GradsimPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            GradsimPhase::Init => "init",
            GradsimPhase::Trained => "trained",
        }
    }
}

/// Router-gradient similarity for one seed. A default-mode model is built
/// from `config` (trained in precision `T`, analyzed at 64-bit) and measured
/// at initialization, after its default vectors absorb a few batches, and
/// again after `warmup_steps` of default-mode training. Analysis batches come
/// from a data stream disjoint from the training one and are the same in both
/// phases.
pub fn gradsim_seed<T: Scalar>(
    config: &RunConfig,
    corpus: Arc<Corpus>,
    seed: u64,
    s: &GradsimSettings,
) -> Result<Vec<(GradsimPhase, GradReport)>, GradError> {
    let mut cfg = config.clone();
    cfg.model.moe.mode = RoutingMode::Default;
    cfg.model.seed = seed;
    cfg.train.checkpoint_path = None;
    let mut trainer = Trainer::<T>::new(cfg, Arc::clone(&corpus))?;
    let seq_len = trainer.config.train.seq_len;
    let batches = (0..s.batches as u64)
        .map(|i| {
            sample_batch(
                &corpus.train,
                &corpus.train_tags,
                s.batch_size,
                seq_len,
                seed ^ ANALYSIS_STREAM_KEY,
                i,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Vec::new();
    let mut init = trainer.model.clone();
    let absorb = ModelForwardOptions {
        mode: Some(RoutingMode::Default),
        ema: EmaPolicy::Update,
        skip_aux: true,
        ..Default::default()
    };
    for step in 0..s.absorb_batches {
        init.loss(&trainer.batch_at(step)?, &absorb)?;
    }
    out.push((
        GradsimPhase::Init,
        similarity_sweep(&init.cast(), &batches, &s.modes, &s.ks, seed)?,
    ));

    if s.warmup_steps > 0 {
        for _ in 0..s.warmup_steps {
            trainer.train_step()?;
        }
        let trained = trainer.model.cast();
        out.push((
            GradsimPhase::Trained,
            similarity_sweep(&trained, &batches, &s.modes, &s.ks, seed)?,
        ));
    }
    Ok(out)
}
