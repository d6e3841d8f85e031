use rand::Rng;

use super::{
    router_forward, topk_select, DefaultApply, DefaultVectorBank, ExpertActivations, ExpertBank,
    MoeError, MoeLayerConfig, RouterParams, RoutingMode, RoutingOutcome,
};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{dot, CustomOp, Graph, Scalar, Tensor, Var};

/// Whether a default-mode forward folds this batch into the EMA before
/// substituting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmaPolicy {
    #[default]
    Update,
    /// Use the bank as-is. Evaluation, finite differences, and analysis that
    /// must not mutate state run this way.
    Frozen,
}

/// Per-call overrides. Defaults reproduce the layer's configured behaviour.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub mode: Option<RoutingMode>,
    pub top_k: Option<usize>,
    /// Use these selections instead of recomputing Top-K from the router.
    pub forced_selection: Option<&'a [Vec<usize>]>,
    pub ema: EmaPolicy,
    /// Keep copies of every expert's outputs in [`MoeOutput::captured`].
    pub capture_outputs: bool,
}

/// Outputs of one expert for the tokens it processed.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedOutputs<T> {
    pub tokens: Vec<usize>,
    pub outputs: Tensor<T>,
}

#[derive(Debug)]
pub struct MoeOutput<T> {
    pub y: Var,
    pub probs: Var,
    pub routing: RoutingOutcome<T>,
    pub mode: RoutingMode,
    /// Number of (token, expert) pairs pushed through an expert FFN.
    pub expert_evaluations: usize,
    pub captured: Option<Vec<Option<CapturedOutputs<T>>>>,
}

/// Router plus expert bank. Default vectors live outside the layer in a
/// [`DefaultVectorBank`] so that parameters and EMA state stay separate.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub config: MoeLayerConfig,
    pub router: RouterParams,
    pub experts: ExpertBank,
}

impl MoeLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: MoeLayerConfig,
        std: f64,
        out_std: f64,
        rng: &mut R,
    ) -> Result<Self, MoeError> {
        config.validate()?;
        let router = RouterParams::new(
            store,
            &format!("{prefix}.router"),
            config.num_experts,
            config.hidden,
            std,
            rng,
        );
        let experts = ExpertBank::new(
            store,
            &format!("{prefix}.experts"),
            config.num_experts,
            config.hidden,
            config.intermediate,
            std,
            out_std,
            rng,
        );
        Ok(Self {
            config,
            router,
            experts,
        })
    }

    pub fn new_bank<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> DefaultVectorBank<T> {
        DefaultVectorBank::new(
            self.config.num_experts,
            self.config.hidden,
            self.config.default_vectors.clone(),
            rng,
        )
    }

    /// Sparse Top-K forward: only selected experts run and only they reach the
    /// router gradient.
    pub fn forward_topk<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        x: Var,
    ) -> Result<MoeOutput<T>, MoeError> {
        let opts = ForwardOptions {
            mode: Some(RoutingMode::TopK),
            ..Default::default()
        };
        self.forward(g, b, x, None, &opts)
    }

    /// Every expert on every token.
    pub fn forward_dense<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        x: Var,
    ) -> Result<MoeOutput<T>, MoeError> {
        let opts = ForwardOptions {
            mode: Some(RoutingMode::Dense),
            ..Default::default()
        };
        self.forward(g, b, x, None, &opts)
    }

    /// Selected experts run; the rest are replaced by their default vectors
    /// after this batch has been folded into the EMA.
    pub fn forward_default<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        x: Var,
        bank: &mut DefaultVectorBank<T>,
    ) -> Result<MoeOutput<T>, MoeError> {
        let opts = ForwardOptions {
            mode: Some(RoutingMode::Default),
            ..Default::default()
        };
        self.forward(g, b, x, Some(bank), &opts)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        x: Var,
        bank: Option<&mut DefaultVectorBank<T>>,
        opts: &ForwardOptions<'_>,
    ) -> Result<MoeOutput<T>, MoeError> {
        let mode = opts.mode.unwrap_or(self.config.mode);
        let n = self.config.num_experts;
        let d = self.config.hidden;
        if g.shape(x).len() != 2 || g.shape(x)[1] != d {
            return Err(MoeError::Tensor(
                crate::tensor::TensorError::ShapeMismatch {
                    op: "moe_forward",
                    lhs: g.shape(x).to_vec(),
                    rhs: vec![self.config.num_experts, d],
                },
            ));
        }
        let tokens = g.shape(x)[0];

        let probs = router_forward(g, b.var(self.router.weight), x)?;
        let pv = g.value(probs).clone();
        let (selected, top_k) = match opts.forced_selection {
            Some(forced) => {
                validate_selection(forced, tokens, n)?;
                (forced.to_vec(), forced[0].len())
            }
            None => {
                let k = opts.top_k.unwrap_or(self.config.top_k);
                (topk_select(&pv, k)?, k)
            }
        };

        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
        match mode {
            RoutingMode::Dense => routed.iter_mut().for_each(|r| r.extend(0..tokens)),
            RoutingMode::TopK | RoutingMode::Default => {
                for (t, sel) in selected.iter().enumerate() {
                    for &i in sel {
                        routed[i].push(t);
                    }
                }
            }
        }

        let mut outs: Vec<Option<Var>> = vec![None; n];
        let mut evaluations = 0;
        for (i, toks) in routed.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let xi = g.gather_rows(x, toks)?;
            outs[i] = Some(self.experts.experts[i].forward(g, b, xi)?);
            evaluations += toks.len();
        }

        let defaults = if mode == RoutingMode::Default {
            let bank = bank.ok_or(MoeError::MissingBank)?;
            if bank.num_experts() != n || bank.hidden() != d {
                return Err(MoeError::BankMismatch {
                    expected: n,
                    expected_dim: d,
                    got: bank.num_experts(),
                    got_dim: bank.hidden(),
                });
            }
            if opts.ema == EmaPolicy::Update {
                let weights: Vec<Vec<T>> = routed
                    .iter()
                    .enumerate()
                    .map(|(i, toks)| toks.iter().map(|&t| pv.row(t)[i]).collect())
                    .collect();
                let acts: Vec<Option<ExpertActivations<'_, T>>> = outs
                    .iter()
                    .zip(&weights)
                    .map(|(o, w)| {
                        o.map(|v| ExpertActivations {
                            outputs: g.value(v).data(),
                            weights: w,
                        })
                    })
                    .collect();
                bank.ema_update(&acts)?;
            }
            Some(bank.vectors().to_vec())
        } else {
            None
        };

        let mut active = vec![false; tokens * n];
        let mut row_of = vec![usize::MAX; tokens * n];
        for (i, toks) in routed.iter().enumerate() {
            for (r, &t) in toks.iter().enumerate() {
                active[t * n + i] = true;
                row_of[t * n + i] = r;
            }
        }
        let forward_defaults = defaults.is_some()
            && self.config.default_vectors.apply == DefaultApply::ForwardAndBackward;

        let mut inputs = vec![probs];
        let mut slot = vec![usize::MAX; n];
        for (i, o) in outs.iter().enumerate() {
            if let Some(v) = o {
                slot[i] = inputs.len();
                inputs.push(*v);
            }
        }

        let mut y = vec![T::zero(); tokens * d];
        for t in 0..tokens {
            let yt = &mut y[t * d..(t + 1) * d];
            let pr = pv.row(t);
            for i in 0..n {
                let src = if active[t * n + i] {
                    g.value(outs[i].unwrap()).row(row_of[t * n + i])
                } else if forward_defaults {
                    &defaults.as_ref().unwrap()[i * d..(i + 1) * d]
                } else {
                    continue;
                };
                let w = pr[i];
                for (o, &e) in yt.iter_mut().zip(src) {
                    *o += w * e;
                }
            }
        }

        let captured = opts.capture_outputs.then(|| {
            outs.iter()
                .zip(&routed)
                .map(|(o, toks)| {
                    o.map(|v| CapturedOutputs {
                        tokens: toks.clone(),
                        outputs: g.value(v).clone(),
                    })
                })
                .collect()
        });

        let combine = MoeCombine {
            num_experts: n,
            hidden: d,
            active,
            row_of,
            slot,
            defaults,
        };
        let y = g.custom(&inputs, Tensor::new(vec![tokens, d], y)?, Box::new(combine));

        Ok(MoeOutput {
            y,
            probs,
            routing: RoutingOutcome {
                probs: pv,
                selected,
                top_k,
            },
            mode,
            expert_evaluations: evaluations,
            captured,
        })
    }
}

fn validate_selection(sel: &[Vec<usize>], tokens: usize, n: usize) -> Result<(), MoeError> {
    if sel.len() != tokens {
        return Err(MoeError::InvalidSelection(format!(
            "{} rows for {tokens} tokens",
            sel.len()
        )));
    }
    let k = sel.first().map_or(0, Vec::len);
    if k == 0 || k > n {
        return Err(MoeError::InvalidTopK { k, n });
    }
    for (t, row) in sel.iter().enumerate() {
        let mut seen = vec![false; n];
        if row.len() != k {
            return Err(MoeError::InvalidSelection(format!(
                "token {t} selects {} experts, expected {k}",
                row.len()
            )));
        }
        for &i in row {
            if i >= n || seen[i] {
                return Err(MoeError::InvalidSelection(format!(
                    "token {t}: bad or repeated expert {i}"
                )));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

/// `y_t = Σ_i π_ti · v_ti` where `v_ti` is the expert output for active pairs
/// and the (constant) default vector otherwise.
///
/// Backward: `∂y/∂π_ti = v_ti`. For inactive pairs this is `Ê_i` whenever a
/// bank is attached, including backward-only mode where the forward value
/// omitted those terms. Default vectors are not graph inputs and get no
/// gradient.
struct MoeCombine<T> {
    num_experts: usize,
    hidden: usize,
    active: Vec<bool>,
    row_of: Vec<usize>,
    /// Input index of each expert's output, `usize::MAX` if it did not run.
    slot: Vec<usize>,
    defaults: Option<Vec<T>>,
}

impl<T: Scalar> CustomOp<T> for MoeCombine<T> {
    fn name(&self) -> &'static str {
        "moe_combine"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (n, d) = (self.num_experts, self.hidden);
        let probs = inputs[0];
        let tokens = probs.rows();
        let mut dprobs = Tensor::zeros(vec![tokens, n]);
        let mut dexperts: Vec<Tensor<T>> = inputs[1..]
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        for t in 0..tokens {
            let gt = grad.row(t);
            for i in 0..n {
                let idx = t * n + i;
                let w = probs.row(t)[i];
                if self.active[idx] {
                    let s = self.slot[i];
                    let r = self.row_of[idx];
                    dprobs.data_mut()[idx] = dot(gt, inputs[s].row(r));
                    for (o, &gv) in dexperts[s - 1].row_mut(r).iter_mut().zip(gt) {
                        *o += w * gv;
                    }
                } else if let Some(def) = &self.defaults {
                    dprobs.data_mut()[idx] = dot(gt, &def[i * d..(i + 1) * d]);
                }
            }
        }
        std::iter::once(Some(dprobs))
            .chain(dexperts.into_iter().map(Some))
            .collect()
    }
}
