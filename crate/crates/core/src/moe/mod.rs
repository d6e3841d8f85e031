//! Mixture-of-Experts layer with three router backward behaviours.
//!
//! * `topk`: only the K selected experts run and contribute; non-selected
//!   experts contribute nothing to the router gradient.
//! * `dense`: every expert runs on every token. The router gradient is the
//!   full one; this is the reference the other modes are measured against.
//! * `default`: only the K selected experts run, but non-selected experts are
//!   stood in for by their default vector (an EMA of past outputs), so every
//!   router row receives a gradient.
//!
//! Combine weights are the raw router probabilities; they are not renormalized
//! over the selected set.

mod aux;
mod bank;
mod expert;
mod layer;
mod router;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use aux::aux_load_balance_loss;
pub use bank::{DefaultVectorBank, ExpertActivations};
pub use expert::{ExpertBank, SwiGluParams};
pub use layer::{CapturedOutputs, EmaPolicy, ForwardOptions, MoeLayer, MoeOutput};
pub use router::{router_forward, topk_select, RouterParams, RoutingOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("top_k = {k} is outside 1..={n}")]
    InvalidTopK { k: usize, n: usize },
    #[error("default-vector bank has {got} experts of width {got_dim}, layer expects {expected} of width {expected_dim}")]
    BankMismatch {
        expected: usize,
        expected_dim: usize,
        got: usize,
        got_dim: usize,
    },
    #[error("default mode needs a default-vector bank")]
    MissingBank,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid forced selection: {0}")]
    InvalidSelection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    #[serde(rename = "topk")]
    TopK,
    Default,
    Dense,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::TopK => "topk",
            RoutingMode::Default => "default",
            RoutingMode::Dense => "dense",
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "topk" => Ok(RoutingMode::TopK),
            "default" => Ok(RoutingMode::Default),
            "dense" => Ok(RoutingMode::Dense),
            other => Err(format!(
                "unknown routing mode {other:?} (expected topk, default or dense)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaInit {
    Zeros,
    Gaussian,
}

/// How the per-batch sample mean fed into the EMA is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaWeighting {
    /// Plain mean of the expert's outputs over its routed tokens.
    Uniform,
    /// Router-probability weighted mean, normalized by the sum of weights.
    Scored,
    /// Router-probability weighted outputs averaged over the token count.
    ScoredUnnormalized,
}

/// Where default vectors are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultApply {
    /// Added to the layer output and used by the router backward.
    ForwardAndBackward,
    /// Only used by the router backward; the forward output is the Top-K one.
    BackwardOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefaultVectorOptions {
    pub beta: f64,
    pub init: EmaInit,
    /// Standard deviation for `gaussian` initialization.
    pub init_std: f64,
    pub weighting: EmaWeighting,
    pub apply: DefaultApply,
}

impl Default for DefaultVectorOptions {
    fn default() -> Self {
        Self {
            beta: 0.9,
            init: EmaInit::Zeros,
            init_std: 0.02,
            weighting: EmaWeighting::Scored,
            apply: DefaultApply::ForwardAndBackward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeLayerConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub mode: RoutingMode,
    /// Auxiliary load-balancing coefficient α.
    pub aux_coef: f64,
    pub default_vectors: DefaultVectorOptions,
}

impl Default for MoeLayerConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            top_k: 1,
            hidden: 64,
            intermediate: 128,
            mode: RoutingMode::Default,
            aux_coef: 0.01,
            default_vectors: DefaultVectorOptions::default(),
        }
    }
}

impl MoeLayerConfig {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MoeError::InvalidTopK {
                k: self.top_k,
                n: self.num_experts,
            });
        }
        if self.hidden == 0 || self.intermediate == 0 {
            return Err(MoeError::InvalidConfig(
                "hidden and intermediate must be positive".into(),
            ));
        }
        if !(self.aux_coef >= 0.0 && self.aux_coef.is_finite()) {
            return Err(MoeError::InvalidConfig(format!(
                "aux_coef must be >= 0, got {}",
                self.aux_coef
            )));
        }
        let beta = self.default_vectors.beta;
        if !(0.0..=1.0).contains(&beta) {
            return Err(MoeError::InvalidConfig(format!(
                "beta must lie in [0, 1], got {beta}"
            )));
        }
        Ok(())
    }

    /// `NcK` shorthand, e.g. `8c1`.
    pub fn shorthand(&self) -> String {
        format!("{}c{}", self.num_experts, self.top_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_bad_k_and_alpha() {
        let mut c = MoeLayerConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.shorthand(), "8c1");
        c.top_k = 9;
        assert_eq!(c.validate(), Err(MoeError::InvalidTopK { k: 9, n: 8 }));
        c.top_k = 0;
        assert!(c.validate().is_err());
        c.top_k = 2;
        c.aux_coef = -0.1;
        assert!(c.validate().is_err());
        c.aux_coef = 0.0;
        c.default_vectors.beta = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [RoutingMode::TopK, RoutingMode::Default, RoutingMode::Dense] {
            assert_eq!(m.as_str().parse::<RoutingMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("sparse".parse::<RoutingMode>().is_err());
    }
}
