use super::{MoeError, RoutingOutcome};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Switch-style load-balancing loss `α·N·Σ_i f_i·P_i`, reduced over the whole
/// batch at once.
///
/// `f_i` is the share of (token, slot) assignments that went to expert `i`
/// and carries no gradient; `P_i` is the mean router probability of expert
/// `i` and is differentiable through `probs`.
pub fn aux_load_balance_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    routing: &RoutingOutcome<T>,
    alpha: f64,
) -> Result<Var, MoeError> {
    let tokens = routing.num_tokens();
    if tokens == 0 {
        return Err(MoeError::EmptyBatch);
    }
    let n = routing.num_experts();
    let slots: usize = routing.selected.iter().map(Vec::len).sum();
    let counts = routing.expert_counts();
    // L = Σ_t Σ_i π_ti · (α·N·f_i / tokens)
    let coef: Vec<f64> = counts
        .iter()
        .map(|&c| alpha * n as f64 * (c as f64 / slots as f64) / tokens as f64)
        .collect();
    let weights: Vec<f64> = (0..tokens).flat_map(|_| coef.iter().copied()).collect();
    let w = g.constant(Tensor::from_f64(vec![tokens, n], &weights)?);
    let weighted = g.mul(probs, w)?;
    Ok(g.sum(weighted))
}
