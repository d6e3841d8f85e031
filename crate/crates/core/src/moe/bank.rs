use rand::Rng;

use super::{DefaultVectorOptions, EmaInit, EmaWeighting, MoeError};
use crate::tensor::{Scalar, Tensor};

/// Outputs one expert produced for its routed tokens in the current batch,
/// detached from any graph.
#[derive(Debug, Clone, Copy)]
pub struct ExpertActivations<'a, T> {
    /// `m×hidden`, row-major.
    pub outputs: &'a [T],
    /// Router probability of this expert for each of the `m` tokens.
    pub weights: &'a [T],
}

/// Per-layer EMA buffers `Ê_i`, one vector of width `hidden` per expert.
///
/// The buffers are plain state: they never become graph leaves, so the
/// backward pass cannot write into them.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultVectorBank<T> {
    num_experts: usize,
    hidden: usize,
    vectors: Vec<T>,
    step: u64,
    options: DefaultVectorOptions,
}

impl<T: Scalar> DefaultVectorBank<T> {
    pub fn new<R: Rng + ?Sized>(
        num_experts: usize,
        hidden: usize,
        options: DefaultVectorOptions,
        rng: &mut R,
    ) -> Self {
        let vectors = match options.init {
            EmaInit::Zeros => vec![T::zero(); num_experts * hidden],
            EmaInit::Gaussian => {
                Tensor::<T>::randn(vec![num_experts, hidden], options.init_std, rng).into_data()
            }
        };
        Self {
            num_experts,
            hidden,
            vectors,
            step: 0,
            options,
        }
    }

    /// Rebuilds a bank from saved state.
    pub fn from_parts(
        num_experts: usize,
        hidden: usize,
        vectors: Vec<T>,
        step: u64,
        options: DefaultVectorOptions,
    ) -> Result<Self, MoeError> {
        if vectors.len() != num_experts * hidden {
            return Err(MoeError::BankMismatch {
                expected: num_experts,
                expected_dim: hidden,
                got: vectors.len() / hidden.max(1),
                got_dim: hidden,
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(MoeError::NonFinite("default vectors"));
        }
        Ok(Self {
            num_experts,
            hidden,
            vectors,
            step,
            options,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn beta(&self) -> f64 {
        self.options.beta
    }

    pub fn options(&self) -> &DefaultVectorOptions {
        &self.options
    }

    /// Number of `ema_update` calls so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn vector(&self, expert: usize) -> &[T] {
        &self.vectors[expert * self.hidden..(expert + 1) * self.hidden]
    }

    /// All vectors, `N×hidden` row-major.
    pub fn vectors(&self) -> &[T] {
        &self.vectors
    }

    pub fn set_vector(&mut self, expert: usize, value: &[T]) {
        assert_eq!(value.len(), self.hidden);
        self.vector_mut(expert).copy_from_slice(value);
    }

    /// Scalars of extra state this bank adds to its layer.
    pub fn memory_scalars(&self) -> usize {
        self.vectors.len()
    }

    fn vector_mut(&mut self, expert: usize) -> &mut [T] {
        &mut self.vectors[expert * self.hidden..(expert + 1) * self.hidden]
    }

    /// `Ê_i ← β·Ê_i + (1−β)·Ē_i` for every expert that saw at least one token.
    ///
    /// `per_expert[i]` is `None` (or empty) for experts with no routed tokens;
    /// those keep their vector. The step counter advances once per call.
    pub fn ema_update(
        &mut self,
        per_expert: &[Option<ExpertActivations<'_, T>>],
    ) -> Result<(), MoeError> {
        if per_expert.len() != self.num_experts {
            return Err(MoeError::BankMismatch {
                expected: per_expert.len(),
                expected_dim: self.hidden,
                got: self.num_experts,
                got_dim: self.hidden,
            });
        }
        for act in per_expert.iter().flatten() {
            if act.outputs.len() != act.weights.len() * self.hidden {
                return Err(MoeError::BankMismatch {
                    expected: self.num_experts,
                    expected_dim: self.hidden,
                    got: self.num_experts,
                    got_dim: act.outputs.len() / act.weights.len().max(1),
                });
            }
            if act
                .outputs
                .iter()
                .chain(act.weights)
                .any(|v| !v.is_finite())
            {
                return Err(MoeError::NonFinite("expert outputs passed to ema_update"));
            }
        }

        let beta = self.options.beta;
        let d = self.hidden;
        let mut mean = vec![0.0f64; d];
        for (i, act) in per_expert.iter().enumerate() {
            let Some(act) = act else { continue };
            let m = act.weights.len();
            if m == 0 {
                continue;
            }
            mean.iter_mut().for_each(|v| *v = 0.0);
            let mut norm = 0.0f64;
            for (row, &w) in act.outputs.chunks(d).zip(act.weights) {
                let w = match self.options.weighting {
                    EmaWeighting::Uniform => 1.0,
                    EmaWeighting::Scored | EmaWeighting::ScoredUnnormalized => w.as_f64(),
                };
                for (acc, &x) in mean.iter_mut().zip(row) {
                    *acc += w * x.as_f64();
                }
                norm += w;
            }
            if self.options.weighting == EmaWeighting::ScoredUnnormalized {
                norm = m as f64;
            }
            if norm <= 0.0 {
                continue;
            }
            for (e, &s) in self.vector_mut(i).iter_mut().zip(&mean) {
                *e = T::of(beta * e.as_f64() + (1.0 - beta) * (s / norm));
            }
        }
        self.step += 1;
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(MoeError::NonFinite("default vectors after ema_update"));
        }
        Ok(())
    }
}
