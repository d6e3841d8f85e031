use rand::Rng;

use super::MoeError;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Router weight `W` of shape `N×d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterParams {
    pub weight: ParamId,
}

impl RouterParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        num_experts: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(vec![num_experts, hidden], std, rng);
        Self {
            weight: store.add(name, w, true),
        }
    }
}

/// `π = softmax(x·Wᵀ)`, one row per token.
pub fn router_forward<T: Scalar>(g: &mut Graph<T>, weight: Var, x: Var) -> Result<Var, MoeError> {
    let logits = g.matmul_nt(x, weight)?;
    Ok(g.softmax_rows(logits)?)
}

/// The `k` largest entries of each row, largest first. Equal probabilities are
/// ordered by expert index, so the lower index wins a tie.
pub fn topk_select<T: Scalar>(probs: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>, MoeError> {
    let n = probs.cols();
    if k == 0 || k > n {
        return Err(MoeError::InvalidTopK { k, n });
    }
    let mut order: Vec<usize> = Vec::with_capacity(n);
    Ok((0..probs.rows())
        .map(|t| {
            let row = probs.row(t);
            order.clear();
            order.extend(0..n);
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            order[..k].to_vec()
        })
        .collect())
}

/// Routing decisions of one MoE layer invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutcome<T> {
    /// Router probabilities, `tokens×N`.
    pub probs: Tensor<T>,
    /// Selected experts per token, best first.
    pub selected: Vec<Vec<usize>>,
    pub top_k: usize,
}

impl<T: Scalar> RoutingOutcome<T> {
    pub fn num_tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn num_experts(&self) -> usize {
        self.probs.cols()
    }

    /// `(expert, π)` pairs for the selected experts of `token`.
    pub fn combine_weights(&self, token: usize) -> Vec<(usize, T)> {
        let row = self.probs.row(token);
        self.selected[token].iter().map(|&i| (i, row[i])).collect()
    }

    /// Number of (token, slot) assignments per expert.
    pub fn expert_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts()];
        for sel in &self.selected {
            for &i in sel {
                counts[i] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor<f64> {
        let n = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_f64(vec![rows.len(), n], &flat).unwrap()
    }

    #[test]
    fn picks_largest() {
        let p = probs(&[&[0.1, 0.5, 0.2, 0.2]]);
        assert_eq!(topk_select(&p, 1).unwrap(), vec![vec![1]]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let p = probs(&[&[0.25, 0.25, 0.25, 0.25]]);
        assert_eq!(topk_select(&p, 2).unwrap(), vec![vec![0, 1]]);
        let p = probs(&[&[0.1, 0.5, 0.2, 0.2]]);
        assert_eq!(topk_select(&p, 2).unwrap(), vec![vec![1, 2]]);
    }

    #[test]
    fn k_equal_n_selects_all() {
        let p = probs(&[&[0.1, 0.5, 0.2, 0.2]]);
        let mut all = topk_select(&p, 4).unwrap().remove(0);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_out_of_range() {
        let p = probs(&[&[0.5, 0.5]]);
        assert_eq!(
            topk_select(&p, 0),
            Err(MoeError::InvalidTopK { k: 0, n: 2 })
        );
        assert_eq!(
            topk_select(&p, 3),
            Err(MoeError::InvalidTopK { k: 3, n: 2 })
        );
    }

    #[test]
    fn zero_router_is_uniform() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::zeros(vec![4, 3]));
        let x = g.constant(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
        let p = router_forward(&mut g, w, x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn identical_rows_split_evenly() {
        let mut g = Graph::<f64>::new();
        let w =
            g.constant(Tensor::from_f64(vec![2, 3], &[0.3, -0.7, 1.1, 0.3, -0.7, 1.1]).unwrap());
        let x = g.constant(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
        let p = router_forward(&mut g, w, x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn expert_counts_and_weights() {
        let p = probs(&[&[0.1, 0.6, 0.3], &[0.7, 0.2, 0.1]]);
        let sel = topk_select(&p, 2).unwrap();
        let r = RoutingOutcome {
            probs: p,
            selected: sel,
            top_k: 2,
        };
        assert_eq!(r.expert_counts(), vec![1, 2, 1]);
        assert_eq!(r.combine_weights(0), vec![(1, 0.6), (2, 0.3)]);
    }
}
