use serde::Serialize;

use super::{GradError, GradReport, GradReportRow};
use crate::analysis::cosine_similarity;
use crate::moe::{EmaPolicy, RoutingMode};
use crate::tensor::Tensor;
use crate::train::{Batch, LanguageModel, ModelForwardOptions};

/// Router weight gradients of one evaluation, one entry per block (`None`
/// for dense blocks), plus the expert selections that produced them.
#[derive(Debug, Clone)]
pub struct RouterGradients {
    pub grads: Vec<Option<Tensor<f64>>>,
    pub selections: Vec<Option<Vec<Vec<usize>>>>,
}

/// Router gradients of the cross-entropy loss in `mode`. The auxiliary loss
/// is left out so the comparison isolates the expert-mixture term. Default
/// vectors are read but never updated.
pub fn router_gradients(
    model: &LanguageModel<f64>,
    batch: &Batch,
    mode: RoutingMode,
    top_k: Option<usize>,
    forced: Option<&[Option<Vec<Vec<usize>>>]>,
) -> Result<RouterGradients, GradError> {
    let mut m = model.clone();
    let opts = ModelForwardOptions {
        mode: Some(mode),
        top_k,
        forced,
        ema: EmaPolicy::Frozen,
        skip_aux: true,
        ..Default::default()
    };
    let (parts, grads, _, out) = m.loss_and_grads(batch, &opts)?;
    if !parts.total.is_finite() {
        return Err(GradError::NonFinite(format!("loss = {}", parts.total)));
    }
    if m.banks != model.banks {
        return Err(GradError::StateDiverged(
            "default vectors changed during evaluation".into(),
        ));
    }
    let grads = m
        .blocks
        .iter()
        .map(|b| {
            b.moe()
                .map(|layer| grads[layer.router.weight.index()].clone())
        })
        .collect();
    Ok(RouterGradients {
        grads,
        selections: out.selections(),
    })
}

/// Router gradients with every expert evaluated. With `forced` the recorded
/// selections are replayed; they only matter for bookkeeping in dense mode.
pub fn dense_router_gradient(
    model: &LanguageModel<f64>,
    batch: &Batch,
    forced: Option<&[Option<Vec<Vec<usize>>>]>,
) -> Result<RouterGradients, GradError> {
    router_gradients(model, batch, RoutingMode::Dense, None, forced)
}

/// Per-layer comparison of a mode's router gradient with the dense one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGradComparison {
    pub layer: usize,
    /// `None` when either gradient has zero norm.
    pub cosine: Option<f64>,
    /// Frobenius norm of `dense - mode`.
    pub eps_norm: f64,
    pub dense_norm: f64,
    pub mode_norm: f64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Evaluates `mode` (with its own Top-K decisions, optionally at `top_k`),
/// then the dense reference on the same selections, and reports the
/// difference per MoE block.
pub fn router_gradient_error(
    model: &LanguageModel<f64>,
    batch: &Batch,
    mode: RoutingMode,
    top_k: Option<usize>,
) -> Result<Vec<LayerGradComparison>, GradError> {
    let sparse = router_gradients(model, batch, mode, top_k, None)?;
    let dense = dense_router_gradient(model, batch, Some(&sparse.selections))?;
    let mut out = Vec::new();
    for (layer, (s, d)) in sparse.grads.iter().zip(&dense.grads).enumerate() {
        let (Some(s), Some(d)) = (s, d) else { continue };
        let eps: Vec<f64> = d.data().iter().zip(s.data()).map(|(a, b)| a - b).collect();
        out.push(LayerGradComparison {
            layer,
            cosine: cosine_similarity(s.data(), d.data()).ok(),
            eps_norm: norm(&eps),
            dense_norm: norm(d.data()),
            mode_norm: norm(s.data()),
        });
    }
    Ok(out)
}

/// Cosine similarity of `mode`'s router gradient to the dense one, per MoE
/// block. Fails if a gradient has zero norm.
pub fn cosine_to_dense(
    model: &LanguageModel<f64>,
    batch: &Batch,
    mode: RoutingMode,
    top_k: Option<usize>,
) -> Result<Vec<f64>, GradError> {
    router_gradient_error(model, batch, mode, top_k)?
        .into_iter()
        .map(|c| c.cosine.ok_or(GradError::ZeroNorm { layer: c.layer }))
        .collect()
}

/// Mean cosine-to-dense and mean ε norm per (layer, K, mode) over `batches`,
/// tagged with `seed`. Batches where a gradient vanishes are left out of the
/// cosine mean but still count towards the ε mean.
pub fn similarity_sweep(
    model: &LanguageModel<f64>,
    batches: &[Batch],
    modes: &[RoutingMode],
    ks: &[usize],
    seed: u64,
) -> Result<GradReport, GradError> {
    let mut rows = Vec::new();
    for &k in ks {
        for &mode in modes {
            let mut cos: Vec<Vec<f64>> = Vec::new();
            let mut eps: Vec<Vec<f64>> = Vec::new();
            let mut layers = Vec::new();
            for batch in batches {
                let cmp = router_gradient_error(model, batch, mode, Some(k))?;
                if layers.is_empty() {
                    layers = cmp.iter().map(|c| c.layer).collect();
                    cos = vec![Vec::new(); layers.len()];
                    eps = vec![Vec::new(); layers.len()];
                }
                for (i, c) in cmp.iter().enumerate() {
                    if let Some(v) = c.cosine {
                        cos[i].push(v);
                    }
                    eps[i].push(c.eps_norm);
                }
            }
            for (i, &layer) in layers.iter().enumerate() {
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                rows.push(GradReportRow {
                    layer,
                    k,
                    mode,
                    cosine: (!cos[i].is_empty()).then(|| mean(&cos[i])),
                    eps_norm: mean(&eps[i]),
                    seed,
                    samples: batches.len(),
                });
            }
        }
    }
    Ok(GradReport { rows })
}
