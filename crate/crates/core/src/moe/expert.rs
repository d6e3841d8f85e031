use rand::Rng;

use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Scalar, Tensor, Var};

/// Weights of one SwiGLU feed-forward block (`hidden → intermediate → hidden`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwiGluParams {
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

impl SwiGluParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        intermediate: usize,
        std: f64,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        let gate = store.add(
            format!("{prefix}.gate"),
            Tensor::randn(vec![hidden, intermediate], std, rng),
            true,
        );
        let up = store.add(
            format!("{prefix}.up"),
            Tensor::randn(vec![hidden, intermediate], std, rng),
            true,
        );
        let down = store.add(
            format!("{prefix}.down"),
            Tensor::randn(vec![intermediate, hidden], out_std, rng),
            true,
        );
        Self { gate, up, down }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        g.swiglu(x, b.var(self.gate), b.var(self.up), b.var(self.down))
    }
}

/// The `N` experts of one MoE layer. All share the same shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertBank {
    pub experts: Vec<SwiGluParams>,
    pub hidden: usize,
    pub intermediate: usize,
}

impl ExpertBank {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        num_experts: usize,
        hidden: usize,
        intermediate: usize,
        std: f64,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        let experts = (0..num_experts)
            .map(|i| {
                SwiGluParams::new(
                    store,
                    &format!("{prefix}.{i}"),
                    hidden,
                    intermediate,
                    std,
                    out_std,
                    rng,
                )
            })
            .collect();
        Self {
            experts,
            hidden,
            intermediate,
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}
