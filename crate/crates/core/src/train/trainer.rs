use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use super::data::{eval_windows, sample_batch, Batch, Corpus};
use super::metrics::MetricsRecord;
use super::model::{LanguageModel, ModelForwardOptions, ModelOutput};
use super::optim::{clip_global_norm, learning_rate, AdamW};
use super::{RunConfig, TrainError};
use crate::analysis::router_entropy;
use crate::moe::{EmaPolicy, RoutingMode};
use crate::tensor::{Graph, Scalar};

const DATA_STREAM_KEY: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Mean cross-entropy per predicted token (nats).
    pub loss: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Mean validation cross-entropy with parameters and default vectors frozen.
/// `batch_size` only sets how many windows share one forward; the result does
/// not depend on it beyond rounding.
pub fn evaluate<T: Scalar>(
    model: &mut LanguageModel<T>,
    windows: &Batch,
    batch_size: usize,
) -> Result<EvalResult, TrainError> {
    if windows.batch_size == 0 {
        return Err(TrainError::EmptyValidation);
    }
    let opts = ModelForwardOptions {
        ema: EmaPolicy::Frozen,
        skip_aux: true,
        ..Default::default()
    };
    let mut total = 0.0;
    let mut tokens = 0;
    let mut start = 0;
    while start < windows.batch_size {
        let count = batch_size.max(1).min(windows.batch_size - start);
        let chunk = windows.slice(start, count);
        let parts = model.loss(&chunk, &opts)?;
        total += parts.ce * chunk.num_tokens() as f64;
        tokens += chunk.num_tokens();
        start += count;
    }
    let loss = total / tokens as f64;
    Ok(EvalResult {
        loss,
        ppl: loss.exp(),
        tokens,
    })
}

/// Model, optimizer and data position for one run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: LanguageModel<T>,
    pub opt: AdamW<T>,
    /// Steps completed.
    pub step: u64,
    corpus: Arc<Corpus>,
    val: Arc<Batch>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig, corpus: Arc<Corpus>) -> Result<Self, TrainError> {
        config.validate()?;
        if let Some(v) = config.model.vocab_size {
            corpus.check_vocab(v)?;
        }
        let model = LanguageModel::new(&config.model, corpus.vocab_size())?;
        let opt = AdamW::new(&config.train, &model.params);
        let val = Arc::new(eval_windows(
            &corpus.val,
            &corpus.val_tags,
            config.train.seq_len,
            config.train.eval_windows,
        )?);
        let mut config = config;
        config.model.vocab_size = Some(model.vocab_size);
        Ok(Self {
            config,
            model,
            opt,
            step: 0,
            corpus,
            val,
        })
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn mode(&self) -> RoutingMode {
        self.config.model.moe.mode
    }

    pub fn seed(&self) -> u64 {
        self.config.model.seed
    }

    /// Training batch for a given step.
    pub fn batch_at(&self, step: u64) -> Result<Batch, TrainError> {
        sample_batch(
            &self.corpus.train,
            &self.corpus.train_tags,
            self.config.train.batch_size,
            self.config.train.seq_len,
            self.seed() ^ DATA_STREAM_KEY,
            step,
        )
    }

    /// One optimizer step on the batch for the current step.
    pub fn train_step(&mut self) -> Result<MetricsRecord, TrainError> {
        let batch = self.batch_at(self.step)?;
        let start = Instant::now();
        let (parts, mut grads, graph, out) =
            match self.model.loss_and_grads(&batch, &Default::default()) {
                Ok(r) => r,
                Err(e) if e.is_numeric() => {
                    return Err(self.non_finite(format!("forward failed: {e}"), None))
                }
                Err(e) => return Err(e),
            };
        if !parts.total.is_finite() {
            return Err(self.non_finite(format!("loss = {}", parts.total), Some((&graph, &out))));
        }
        let expert_counts: Vec<Vec<usize>> = out
            .moe
            .iter()
            .flatten()
            .map(|m| m.routing.expert_counts())
            .collect();
        let router_entropy = out
            .moe
            .iter()
            .flatten()
            .map(|m| router_entropy(&m.routing.probs))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| self.non_finite(e.to_string(), Some((&graph, &out))))?;
        drop(graph);

        let grad_norm = clip_global_norm(&mut grads, self.config.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(self.non_finite(format!("gradient norm = {grad_norm}"), None));
        }
        let lr = learning_rate(&self.config.train, self.step);
        self.opt.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        let secs = start.elapsed().as_secs_f64().max(1e-9);

        Ok(MetricsRecord {
            step: self.step,
            mode: self.mode(),
            seed: self.seed(),
            train_loss: parts.ce,
            aux_loss: parts.aux,
            val_loss: None,
            ppl: None,
            tokens_per_sec: batch.num_tokens() as f64 / secs,
            lr,
            grad_norm,
            expert_counts,
            router_entropy,
        })
    }

    pub fn evaluate(&mut self) -> Result<EvalResult, TrainError> {
        let val = Arc::clone(&self.val);
        evaluate(&mut self.model, &val, self.config.train.eval_batch_size)
    }

    /// Trains until `config.train.steps`, evaluating at the configured
    /// interval and after the final step. Saves checkpoints when a path is
    /// configured. Every record is passed to `sink` as it is produced.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&MetricsRecord) -> Result<(), TrainError>,
    ) -> Result<Vec<MetricsRecord>, TrainError> {
        let total = self.config.train.steps;
        let eval_every = self.config.train.eval_interval;
        let ckpt_every = self.config.train.checkpoint_interval;
        let mut records = Vec::new();
        while self.step < total {
            let mut rec = self.train_step()?;
            if rec.step == total || (eval_every > 0 && rec.step % eval_every == 0) {
                let e = self.evaluate()?;
                rec.val_loss = Some(e.loss);
                rec.ppl = Some(e.ppl);
            }
            if let Some(path) = self.config.train.checkpoint_path.clone() {
                if rec.step == total || (ckpt_every > 0 && rec.step % ckpt_every == 0) {
                    self.save(Path::new(&path))?;
                }
            }
            sink(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        super::checkpoint::save_checkpoint(self, path)
    }

    fn non_finite(
        &self,
        reason: String,
        trace: Option<(&Graph<T>, &ModelOutput<T>)>,
    ) -> TrainError {
        let mut d = String::new();
        let _ = writeln!(d, "reason: {reason}");
        if let Some((_, out)) = trace {
            for (l, m) in out.moe.iter().enumerate() {
                let Some(m) = m else { continue };
                let p = m.routing.probs.to_f64();
                let finite = p.iter().filter(|x| x.is_finite()).count();
                let min = p.iter().copied().fold(f64::INFINITY, f64::min);
                let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let _ = writeln!(
                    d,
                    "block {l} router probs: min {min} max {max} finite {finite}/{}",
                    p.len()
                );
            }
        }
        for (l, bank) in self.model.banks.iter().enumerate() {
            let Some(bank) = bank else { continue };
            let norms: Vec<String> = (0..bank.num_experts())
                .map(|i| {
                    let n: f64 = bank
                        .vector(i)
                        .iter()
                        .map(|x| x.as_f64().powi(2))
                        .sum::<f64>()
                        .sqrt();
                    format!("{n:.4e}")
                })
                .collect();
            let _ = writeln!(
                d,
                "block {l} default-vector norms: [{}] (t = {})",
                norms.join(", "),
                bank.step()
            );
        }
        TrainError::NonFinite {
            step: self.step,
            diagnostics: d,
        }
    }

    pub(crate) fn from_parts(
        config: RunConfig,
        corpus: Arc<Corpus>,
        model: LanguageModel<T>,
        opt: AdamW<T>,
        step: u64,
    ) -> Result<Self, TrainError> {
        let val = Arc::new(eval_windows(
            &corpus.val,
            &corpus.val_tags,
            config.train.seq_len,
            config.train.eval_windows,
        )?);
        Ok(Self {
            config,
            model,
            opt,
            step,
            corpus,
            val,
        })
    }
}
