//! Routing statistics: router entropy, default-vector similarity, routing
//! frequency (overall and per source tag) and expert coactivation.
//!
//! Entropies are in nats. Everything here reads snapshots and never touches
//! default-vector state.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::moe::{DefaultVectorBank, EmaPolicy, RoutingMode};
use crate::tensor::{Scalar, Tensor};
use crate::train::{Batch, LanguageModel, ModelForwardOptions, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("router row {row} sums to {sum}, expected 1")]
    Unnormalized { row: usize, sum: f64 },
    #[error("empty input")]
    Empty,
    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("expert index {index} out of range for {experts} experts")]
    BadExpert { index: usize, experts: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Cosine of two equal-length vectors, computed in `f64` and clamped to
/// `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(AnalysisError::ZeroNorm);
    }
    Ok((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean over tokens of `-Σ_i π_i ln π_i`.
pub fn router_entropy<T: Scalar>(probs: &Tensor<T>) -> Result<f64, AnalysisError> {
    let n = probs.cols();
    let tol = if T::PRECISION.bytes() == 4 {
        1e-4
    } else {
        1e-9
    };
    let mut total = 0.0;
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
        if !((sum - 1.0).abs() <= tol) || row.iter().any(|p| p.as_f64() < 0.0) {
            return Err(AnalysisError::Unnormalized { row: r, sum });
        }
        let h: f64 = row
            .iter()
            .map(|p| p.as_f64())
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        total += h;
    }
    Ok((total / probs.rows() as f64).clamp(0.0, (n as f64).ln()))
}

/// Pairwise cosine similarity of default vectors. Entries involving a
/// zero-norm vector are `None`.
pub fn default_vector_similarity<T: Scalar>(bank: &DefaultVectorBank<T>) -> Vec<Vec<Option<f64>>> {
    let n = bank.num_experts();
    let v: Vec<Vec<f64>> = (0..n)
        .map(|i| bank.vector(i).iter().map(|x| x.as_f64()).collect())
        .collect();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = cosine_similarity(&v[i], &v[j]).ok();
            let c = if i == j { c.map(|_| 1.0) } else { c };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingFrequency {
    /// Fraction of routed slots per expert.
    pub overall: Vec<f64>,
    /// Same, restricted to tokens of each source tag.
    pub per_tag: BTreeMap<usize, Vec<f64>>,
}

impl RoutingFrequency {
    /// `max / min` of the overall frequencies; infinite if an expert is idle.
    pub fn max_min_ratio(&self) -> f64 {
        let max = self.overall.iter().copied().fold(0.0, f64::max);
        let min = self.overall.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Share of routed (token, slot) pairs that went to each expert.
pub fn routing_frequency(
    selected: &[Vec<usize>],
    tags: &[usize],
    num_experts: usize,
) -> Result<RoutingFrequency, AnalysisError> {
    assert_eq!(selected.len(), tags.len(), "one tag per token");
    let mut overall = vec![0usize; num_experts];
    let mut per_tag: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (sel, &tag) in selected.iter().zip(tags) {
        let row = per_tag.entry(tag).or_insert_with(|| vec![0; num_experts]);
        for &i in sel {
            if i >= num_experts {
                return Err(AnalysisError::BadExpert {
                    index: i,
                    experts: num_experts,
                });
            }
            overall[i] += 1;
            row[i] += 1;
        }
    }
    let norm = |c: &[usize]| -> Result<Vec<f64>, AnalysisError> {
        let total: usize = c.iter().sum();
        if total == 0 {
            return Err(AnalysisError::Empty);
        }
        Ok(c.iter().map(|&x| x as f64 / total as f64).collect())
    };
    Ok(RoutingFrequency {
        overall: norm(&overall)?,
        per_tag: per_tag
            .iter()
            .map(|(&t, c)| norm(c).map(|f| (t, f)))
            .collect::<Result<_, _>>()?,
    })
}

/// `co[i][j]` (i ≠ j): fraction of tokens routed to both `i` and `j`.
/// `co[i][i]`: fraction of tokens routed to `i`.
pub fn expert_coactivation(selected: &[Vec<usize>], num_experts: usize) -> Vec<Vec<f64>> {
    let mut co = vec![vec![0.0; num_experts]; num_experts];
    if selected.is_empty() {
        return co;
    }
    for sel in selected {
        for &i in sel {
            for &j in sel {
                co[i][j] += 1.0;
            }
        }
    }
    let t = selected.len() as f64;
    co.iter_mut().flatten().for_each(|x| *x /= t);
    co
}

/// Statistics for one MoE block.
#[derive(Debug, Clone, Serialize)]
pub struct LayerAnalysis {
    pub layer: usize,
    pub entropy: f64,
    pub frequency: RoutingFrequency,
    pub coactivation: Vec<Vec<f64>>,
    /// `None` when the model has no bank for this block.
    pub default_similarity: Option<Vec<Vec<Option<f64>>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelAnalysis {
    pub mode: RoutingMode,
    pub tokens: usize,
    pub tag_names: Vec<String>,
    pub layers: Vec<LayerAnalysis>,
}

/// Runs `batch` through `model` with default vectors frozen and collects the
/// routing statistics of every MoE block.
pub fn analyze_model<T: Scalar>(
    model: &mut LanguageModel<T>,
    batch: &Batch,
    mode: RoutingMode,
    tag_names: &[String],
) -> Result<ModelAnalysis, AnalysisError> {
    let before = model.banks.clone();
    let opts = ModelForwardOptions {
        mode: Some(mode),
        ema: EmaPolicy::Frozen,
        skip_aux: true,
        ..Default::default()
    };
    let mut g = crate::tensor::Graph::new();
    let b = model.params.bind_frozen(&mut g);
    let out = model.forward(&mut g, &b, batch, &opts)?;
    debug_assert_eq!(model.banks, before);
    let mut layers = Vec::new();
    for (l, m) in out.moe.iter().enumerate() {
        let Some(m) = m else { continue };
        let n = m.routing.num_experts();
        layers.push(LayerAnalysis {
            layer: l,
            entropy: router_entropy(&m.routing.probs)?,
            frequency: routing_frequency(&m.routing.selected, &batch.tags, n)?,
            coactivation: expert_coactivation(&m.routing.selected, n),
            default_similarity: model.banks[l].as_ref().map(default_vector_similarity),
        });
    }
    Ok(ModelAnalysis {
        mode,
        tokens: batch.num_tokens(),
        tag_names: tag_names.to_vec(),
        layers,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), AnalysisError> {
    let io = |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

fn matrix_csv(m: &[Vec<Option<f64>>]) -> String {
    let n = m.first().map_or(0, Vec::len);
    let mut s = String::from("expert");
    (0..n).for_each(|j| s.push_str(&format!(",e{j}")));
    s.push('\n');
    for (i, row) in m.iter().enumerate() {
        s.push_str(&format!("e{i}"));
        for v in row {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `<dir>/<metric>_layer<k>.csv` files and `<dir>/summary.json`.
/// Returns the paths written.
pub fn write_analysis(dir: &Path, a: &ModelAnalysis) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(dir).map_err(|source| AnalysisError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), AnalysisError> {
        let p = dir.join(name);
        write_file(&p, &text)?;
        written.push(p);
        Ok(())
    };
    for l in &a.layers {
        let k = l.layer;
        put(
            format!("entropy_layer{k}.csv"),
            format!("layer,entropy_nats\n{k},{}\n", l.entropy),
        )?;

        let mut freq = String::from("group,tag");
        (0..l.frequency.overall.len()).for_each(|j| freq.push_str(&format!(",e{j}")));
        freq.push('\n');
        let mut row = |group: &str, tag: &str, f: &[f64]| {
            freq.push_str(&format!("{group},{tag}"));
            f.iter().for_each(|x| freq.push_str(&format!(",{x}")));
            freq.push('\n');
        };
        row("overall", "", &l.frequency.overall);
        for (t, f) in &l.frequency.per_tag {
            let name = a
                .tag_names
                .get(*t)
                .cloned()
                .unwrap_or_else(|| t.to_string());
            row("tag", &name, f);
        }
        put(format!("routing_frequency_layer{k}.csv"), freq)?;

        let co: Vec<Vec<Option<f64>>> = l
            .coactivation
            .iter()
            .map(|r| r.iter().map(|&x| Some(x)).collect())
            .collect();
        put(format!("coactivation_layer{k}.csv"), matrix_csv(&co))?;
        if let Some(sim) = &l.default_similarity {
            put(format!("default_similarity_layer{k}.csv"), matrix_csv(sim))?;
        }
    }
    put(
        "summary.json".into(),
        serde_json::to_string_pretty(a).expect("analysis serializes"),
    )?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::DefaultVectorOptions;
    use rand::SeedableRng;

    #[test]
    fn entropy_extremes() {
        let u = Tensor::<f64>::full(vec![3, 8], 0.125);
        assert!((router_entropy(&u).unwrap() - 8f64.ln()).abs() < 1e-12);
        let mut one = vec![0.0; 8];
        one[3] = 1.0;
        let t = Tensor::<f64>::new(vec![1, 8], one).unwrap();
        assert_eq!(router_entropy(&t).unwrap(), 0.0);
        let bad = Tensor::<f64>::full(vec![1, 4], 0.3);
        assert!(matches!(
            router_entropy(&bad),
            Err(AnalysisError::Unnormalized { .. })
        ));
    }

    #[test]
    fn similarity_flags_zero_vectors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut b = DefaultVectorBank::<f64>::new(3, 2, DefaultVectorOptions::default(), &mut rng);
        b.set_vector(0, &[1.0, 0.0]);
        b.set_vector(1, &[0.0, 2.0]);
        let m = default_vector_similarity(&b);
        assert_eq!(m[0][0], Some(1.0));
        assert_eq!(m[0][1], Some(0.0));
        assert_eq!(m[2][0], None);
        assert_eq!(m[2][2], None);
    }

    #[test]
    fn frequency_examples() {
        let sel: Vec<Vec<usize>> = (0..8).map(|t| vec![t % 4]).collect();
        let f = routing_frequency(&sel, &[0; 8], 4).unwrap();
        assert_eq!(f.overall, vec![0.25; 4]);
        assert_eq!(f.max_min_ratio(), 1.0);
        let f = routing_frequency(&[vec![0], vec![0]], &[0, 1], 3).unwrap();
        assert_eq!(f.overall, vec![1.0, 0.0, 0.0]);
        assert_eq!(f.per_tag.len(), 2);
        assert!(f.max_min_ratio().is_infinite());
        assert!(matches!(
            routing_frequency(&[], &[], 3),
            Err(AnalysisError::Empty)
        ));
        assert!(routing_frequency(&[vec![5]], &[0], 3).is_err());
    }

    #[test]
    fn coactivation_examples() {
        let co = expert_coactivation(&[vec![0], vec![1], vec![1]], 3);
        assert_eq!(co[0][1], 0.0);
        assert!((co[1][1] - 2.0 / 3.0).abs() < 1e-15);
        let all: Vec<Vec<usize>> = vec![vec![0, 1, 2]; 4];
        let co = expert_coactivation(&all, 3);
        assert!(co.iter().flatten().all(|&x| x == 1.0));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(&[0.0], &[1.0]),
            Err(AnalysisError::ZeroNorm)
        ));
    }
}
