use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Batch;
use super::{ModelConfig, TrainError};
use crate::moe::{
    aux_load_balance_loss, DefaultVectorBank, EmaPolicy, ForwardOptions, MoeLayer, MoeOutput,
    RoutingMode, SwiGluParams,
};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Ffn {
    Dense(SwiGluParams),
    Moe(MoeLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub ffn: Ffn,
}

impl Block {
    pub fn moe(&self) -> Option<&MoeLayer> {
        match &self.ffn {
            Ffn::Moe(m) => Some(m),
            Ffn::Dense(_) => None,
        }
    }
}

/// Per-call overrides for [`LanguageModel::forward`].
#[derive(Debug, Clone, Default)]
pub struct ModelForwardOptions<'a> {
    pub mode: Option<RoutingMode>,
    pub top_k: Option<usize>,
    /// Per block; `Some` entries fix that MoE layer's expert selection.
    pub forced: Option<&'a [Option<Vec<Vec<usize>>>]>,
    pub ema: EmaPolicy,
    pub capture_outputs: bool,
    /// Leave the auxiliary loss out of `loss`.
    pub skip_aux: bool,
}

#[derive(Debug)]
pub struct ModelOutput<T> {
    /// `ce + aux`.
    pub loss: Var,
    pub ce: Var,
    pub aux: Option<Var>,
    pub logits: Var,
    /// One entry per block, `Some` for MoE blocks.
    pub moe: Vec<Option<MoeOutput<T>>>,
}

impl<T> ModelOutput<T> {
    /// Selections per block, in the shape accepted by
    /// [`ModelForwardOptions::forced`].
    pub fn selections(&self) -> Vec<Option<Vec<Vec<usize>>>> {
        self.moe
            .iter()
            .map(|m| m.as_ref().map(|m| m.routing.selected.clone()))
            .collect()
    }

    pub fn expert_evaluations(&self) -> usize {
        self.moe
            .iter()
            .flatten()
            .map(|m| m.expert_evaluations)
            .sum()
    }
}

/// Character-level decoder: token + learned position embeddings, pre-norm
/// blocks of single-head causal attention and a (Mo)E feed-forward, final
/// RMS norm and a linear readout.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub out: ParamId,
    /// Default-vector state, one bank per MoE block.
    pub banks: Vec<Option<DefaultVectorBank<T>>>,
}

impl<T: Scalar> LanguageModel<T> {
    /// Initializes from `config.seed`. `config.vocab_size`, when set, takes
    /// precedence over `vocab_size`.
    pub fn new(config: &ModelConfig, vocab_size: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let vocab = config.vocab_size.unwrap_or(vocab_size);
        if vocab == 0 {
            return Err(TrainError::Config("vocabulary is empty".into()));
        }
        let mut config = config.clone();
        config.vocab_size = Some(vocab);
        let (d, inter) = (config.hidden(), config.intermediate());
        let std = config.init_std;
        let out_std = std / (2.0 * config.layers as f64).sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut bank_rng = ChaCha8Rng::seed_from_u64(config.seed);
        bank_rng.set_stream(1);

        let mut p = ParamStore::new();
        let tok_emb = p.add(
            "tok_emb",
            Tensor::randn(vec![vocab, d], std, &mut rng),
            true,
        );
        let pos_emb = p.add(
            "pos_emb",
            Tensor::randn(vec![config.max_seq_len, d], std, &mut rng),
            true,
        );
        let mut blocks = Vec::with_capacity(config.layers);
        let mut banks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let pre = format!("block{l}");
            let attn_norm = p.add(
                format!("{pre}.attn_norm"),
                Tensor::full(vec![d], T::one()),
                false,
            );
            let wq = p.add(
                format!("{pre}.wq"),
                Tensor::randn(vec![d, d], std, &mut rng),
                true,
            );
            let wk = p.add(
                format!("{pre}.wk"),
                Tensor::randn(vec![d, d], std, &mut rng),
                true,
            );
            let wv = p.add(
                format!("{pre}.wv"),
                Tensor::randn(vec![d, d], std, &mut rng),
                true,
            );
            let wo = p.add(
                format!("{pre}.wo"),
                Tensor::randn(vec![d, d], out_std, &mut rng),
                true,
            );
            let ffn_norm = p.add(
                format!("{pre}.ffn_norm"),
                Tensor::full(vec![d], T::one()),
                false,
            );
            let ffn = if config.is_moe_layer(l) {
                let layer = MoeLayer::new(
                    &mut p,
                    &format!("{pre}.moe"),
                    config.moe.clone(),
                    std,
                    out_std,
                    &mut rng,
                )?;
                banks.push(Some(layer.new_bank(&mut bank_rng)));
                Ffn::Moe(layer)
            } else {
                banks.push(None);
                Ffn::Dense(SwiGluParams::new(
                    &mut p,
                    &format!("{pre}.ffn"),
                    d,
                    inter,
                    std,
                    out_std,
                    &mut rng,
                ))
            };
            blocks.push(Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = p.add("final_norm", Tensor::full(vec![d], T::one()), false);
        let out = p.add("out", Tensor::randn(vec![d, vocab], std, &mut rng), true);
        Ok(Self {
            config,
            vocab_size: vocab,
            params: p,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            out,
            banks,
        })
    }

    /// Same weights and default vectors at another precision.
    pub fn cast<U: Scalar>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            out: self.out,
            banks: self
                .banks
                .iter()
                .map(|b| {
                    b.as_ref().map(|b| {
                        let v = b.vectors().iter().map(|x| U::of(x.as_f64())).collect();
                        DefaultVectorBank::from_parts(
                            b.num_experts(),
                            b.hidden(),
                            v,
                            b.step(),
                            b.options().clone(),
                        )
                        .expect("shape preserved")
                    })
                })
                .collect(),
        }
    }

    /// Scalars held by default-vector banks.
    pub fn bank_memory_scalars(&self) -> usize {
        self.banks
            .iter()
            .flatten()
            .map(|b| b.memory_scalars())
            .sum()
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = (usize, &MoeLayer)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(l, b)| b.moe().map(|m| (l, m)))
    }

    /// Records the forward pass on `g`. `b` must come from binding
    /// `self.params` to `g`.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        b: &Bindings,
        batch: &Batch,
        opts: &ModelForwardOptions<'_>,
    ) -> Result<ModelOutput<T>, TrainError> {
        let seq = batch.seq_len;
        if seq > self.config.max_seq_len {
            return Err(TrainError::Config(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(f) = opts.forced {
            if f.len() != self.blocks.len() {
                return Err(TrainError::Config(format!(
                    "forced selections for {} blocks, model has {}",
                    f.len(),
                    self.blocks.len()
                )));
            }
        }
        let eps = self.config.norm_eps;
        let positions: Vec<usize> = (0..batch.num_tokens()).map(|i| i % seq).collect();
        let tok = g.embedding(b.var(self.tok_emb), &batch.inputs)?;
        let pos = g.gather_rows(b.var(self.pos_emb), &positions)?;
        let mut h = g.add(tok, pos)?;

        let mut moe_out = Vec::with_capacity(self.blocks.len());
        for (l, (block, bank)) in self.blocks.iter().zip(self.banks.iter_mut()).enumerate() {
            let a = g.rms_norm(h, b.var(block.attn_norm), eps)?;
            let q = g.matmul(a, b.var(block.wq))?;
            let k = g.matmul(a, b.var(block.wk))?;
            let v = g.matmul(a, b.var(block.wv))?;
            let att = g.causal_attention(q, k, v, seq)?;
            let o = g.matmul(att, b.var(block.wo))?;
            h = g.add(h, o)?;

            let f = g.rms_norm(h, b.var(block.ffn_norm), eps)?;
            let (y, rec) = match &block.ffn {
                Ffn::Dense(p) => (p.forward(g, b, f)?, None),
                Ffn::Moe(layer) => {
                    let forced = opts.forced.and_then(|fs| fs[l].as_deref());
                    let lo = ForwardOptions {
                        mode: opts.mode,
                        top_k: opts.top_k,
                        forced_selection: forced,
                        ema: opts.ema,
                        capture_outputs: opts.capture_outputs,
                    };
                    let out = layer.forward(g, b, f, bank.as_mut(), &lo)?;
                    (out.y, Some(out))
                }
            };
            h = g.add(h, y)?;
            moe_out.push(rec);
        }

        let hn = g.rms_norm(h, b.var(self.final_norm), eps)?;
        let logits = g.matmul(hn, b.var(self.out))?;
        let ce = g.cross_entropy(logits, &batch.targets)?;

        let mut aux = None;
        if !opts.skip_aux && self.config.moe.aux_coef > 0.0 {
            for out in moe_out.iter().flatten() {
                let term =
                    aux_load_balance_loss(g, out.probs, &out.routing, self.config.moe.aux_coef)?;
                aux = Some(match aux {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
        }
        let loss = match aux {
            Some(a) => g.add(ce, a)?,
            None => ce,
        };
        Ok(ModelOutput {
            loss,
            ce,
            aux,
            logits,
            moe: moe_out,
        })
    }

    /// Forward and backward on a fresh graph. Returns the loss value, the
    /// gradient of every parameter in store order, and the forward record.
    pub fn loss_and_grads(
        &mut self,
        batch: &Batch,
        opts: &ModelForwardOptions<'_>,
    ) -> Result<(LossParts, Vec<Tensor<T>>, Graph<T>, ModelOutput<T>), TrainError> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let out = self.forward(&mut g, &b, batch, opts)?;
        let parts = LossParts::read(&g, &out);
        g.backward(out.loss)?;
        let grads = b.grads(&g);
        Ok((parts, grads, g, out))
    }

    /// Loss without building gradients.
    pub fn loss(
        &mut self,
        batch: &Batch,
        opts: &ModelForwardOptions<'_>,
    ) -> Result<LossParts, TrainError> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &b, batch, opts)?;
        Ok(LossParts::read(&g, &out))
    }
}

/// Scalar loss components as `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub aux: f64,
}

impl LossParts {
    fn read<T: Scalar>(g: &Graph<T>, out: &ModelOutput<T>) -> Self {
        Self {
            total: g.value(out.loss).item().as_f64(),
            ce: g.value(out.ce).item().as_f64(),
            aux: out.aux.map_or(0.0, |a| g.value(a).item().as_f64()),
        }
    }
}
