use serde::Serialize;

use crate::moe::RoutingMode;

pub const GRAD_CSV_HEADER: &str = "layer,K,mode,cosine,eps_norm,seed,samples";

/// One (layer, K, mode, seed) cell, averaged over `samples` batches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReportRow {
    pub layer: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: RoutingMode,
    /// `None` if no batch gave a defined cosine.
    pub cosine: Option<f64>,
    pub eps_norm: f64,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradReport {
    pub rows: Vec<GradReportRow>,
}

impl GradReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{GRAD_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.layer,
                r.k,
                r.mode,
                r.cosine.map(|c| c.to_string()).unwrap_or_default(),
                r.eps_norm,
                r.seed,
                r.samples
            ));
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }

    /// Mean cosine and mean ε norm over all rows of `mode` at `k`.
    pub fn mode_means(&self, mode: RoutingMode, k: usize) -> Option<(f64, f64)> {
        let rows: Vec<&GradReportRow> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode && r.k == k)
            .collect();
        let cos: Vec<f64> = rows.iter().filter_map(|r| r.cosine).collect();
        if cos.is_empty() {
            return None;
        }
        let eps = rows.iter().map(|r| r.eps_norm).sum::<f64>() / rows.len() as f64;
        Some((cos.iter().sum::<f64>() / cos.len() as f64, eps))
    }
}
