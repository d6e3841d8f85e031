use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::moe::MoeLayerConfig;

/// Language-model shape. Hidden and intermediate widths are taken from `moe`
/// so there is one source of truth for every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output vocabulary. `None` sizes it to the corpus alphabet.
    pub vocab_size: Option<usize>,
    pub layers: usize,
    /// Attention heads. Only 1 is supported.
    pub heads: usize,
    pub max_seq_len: usize,
    /// Use a plain SwiGLU FFN in the first block instead of an MoE layer.
    pub first_layer_dense: bool,
    pub init_std: f64,
    pub norm_eps: f64,
    pub seed: u64,
    pub moe: MoeLayerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: None,
            layers: 4,
            heads: 1,
            max_seq_len: 128,
            first_layer_dense: true,
            init_std: 0.02,
            norm_eps: 1e-6,
            seed: 0,
            moe: MoeLayerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.moe.hidden
    }

    pub fn intermediate(&self) -> usize {
        self.moe.intermediate
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        !(self.first_layer_dense && layer == 0)
    }

    pub fn num_moe_layers(&self) -> usize {
        (0..self.layers).filter(|&l| self.is_moe_layer(l)).count()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.moe.validate()?;
        if self.layers == 0 {
            return Err(TrainError::Config("model.layers must be >= 1".into()));
        }
        if self.heads != 1 {
            return Err(TrainError::Config(format!(
                "model.heads must be 1, got {}",
                self.heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(TrainError::Config("model.max_seq_len must be >= 1".into()));
        }
        if self.vocab_size == Some(0) {
            return Err(TrainError::Config("model.vocab_size must be >= 1".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(TrainError::Config("model.init_std must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(TrainError::Config("model.norm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Sequences per batch.
    pub batch_size: usize,
    pub seq_len: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: u64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Evaluate every this many steps (and after the last). 0 only at the end.
    pub eval_interval: u64,
    /// Cap on validation windows per evaluation. 0 uses the whole split.
    pub eval_windows: usize,
    /// Sequences per evaluation forward.
    pub eval_batch_size: usize,
    /// Corpus files; each file is one source tag.
    pub corpus: Vec<String>,
    /// Fraction of each file used for training.
    pub train_ratio: f64,
    pub checkpoint_path: Option<String>,
    /// Save every this many steps when `checkpoint_path` is set. 0 only at the end.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            seq_len: 128,
            lr: 3e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_interval: 100,
            eval_windows: 64,
            eval_batch_size: 16,
            corpus: vec![
                "data/corpus/moby_dick.txt".into(),
                "data/corpus/state_of_the_union_1790_1819.txt".into(),
            ],
            train_ratio: 0.9,
            checkpoint_path: None,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if self.steps == 0 {
            return bad("train.steps must be >= 1");
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_batch_size == 0 {
            return bad("train.batch_size, train.seq_len and train.eval_batch_size must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("train.min_lr_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("train.adam_eps must be positive; weight_decay and grad_clip non-negative");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad("train.train_ratio must lie in (0, 1)");
        }
        Ok(())
    }
}

/// A full run description, the JSON document read by `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(TrainError::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `model.moe.top_k=2`. Values are parsed as JSON, falling back to a bare
    /// string. Unknown keys and ill-typed values are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, TrainError> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("override {raw:?} is not key=value")))?;
            let value: Value =
                serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| TrainError::Config(e.to_string()))
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), TrainError> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| TrainError::Config(format!("unknown key {key:?}")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| TrainError::Config(format!("unknown key {key:?}")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(TrainError::Config(format!(
                    "key {key:?} names a section, not a value"
                )));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
