use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::TrainError;
use crate::moe::RoutingMode;

pub const CSV_HEADER: &str = "step,mode,seed,train_loss,val_loss,ppl,aux_loss,tokens_per_sec";

/// Telemetry for one training step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// Steps completed, counting this one.
    pub step: u64,
    pub mode: RoutingMode,
    pub seed: u64,
    /// Cross-entropy on the training batch.
    pub train_loss: f64,
    pub aux_loss: f64,
    pub val_loss: Option<f64>,
    pub ppl: Option<f64>,
    pub tokens_per_sec: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Per MoE layer: tokens-slots routed to each expert on this batch.
    pub expert_counts: Vec<Vec<usize>>,
    /// Per MoE layer: mean router entropy (nats) on this batch.
    pub router_entropy: Vec<f64>,
}

impl MetricsRecord {
    /// Equality of everything except wall-clock throughput.
    pub fn same_trace(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.tokens_per_sec = other.tokens_per_sec;
        &a == other
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mode,
            self.seed,
            self.train_loss,
            opt(self.val_loss),
            opt(self.ppl),
            self.aux_loss,
            self.tokens_per_sec
        )
    }
}

/// Append-only CSV of [`MetricsRecord`]s plus a JSON-lines event log.
pub struct MetricsWriter {
    csv: BufWriter<File>,
    events: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates `<stem>.csv` and `<stem>.jsonl` in `dir`.
    pub fn create(dir: &Path, stem: &str) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        let open = |ext: &str| {
            let p = dir.join(format!("{stem}.{ext}"));
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| TrainError::io(&p, e))
        };
        let mut csv = open("csv")?;
        let events = open("jsonl")?;
        writeln!(csv, "{CSV_HEADER}").map_err(|e| TrainError::io(dir, e))?;
        Ok(Self { csv, events })
    }

    pub fn record(&mut self, r: &MetricsRecord) -> Result<(), TrainError> {
        writeln!(self.csv, "{}", r.csv_row())
            .map_err(|e| TrainError::io(Path::new("metrics csv"), e))?;
        let line = serde_json::json!({ "event": "step", "data": r });
        self.event(&line)
    }

    pub fn event(&mut self, value: &serde_json::Value) -> Result<(), TrainError> {
        writeln!(self.events, "{value}").map_err(|e| TrainError::io(Path::new("metrics jsonl"), e))
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.csv
            .flush()
            .map_err(|e| TrainError::io(Path::new("metrics csv"), e))?;
        self.events
            .flush()
            .map_err(|e| TrainError::io(Path::new("metrics jsonl"), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> MetricsRecord {
        MetricsRecord {
            step: 3,
            mode: RoutingMode::TopK,
            seed: 1,
            train_loss: 2.5,
            aux_loss: 0.01,
            val_loss: None,
            ppl: None,
            tokens_per_sec: 100.0,
            lr: 0.001,
            grad_norm: 0.5,
            expert_counts: vec![vec![1, 2]],
            router_entropy: vec![0.6],
        }
    }

    #[test]
    fn csv_row_matches_header() {
        let r = rec();
        assert_eq!(r.csv_row(), "3,topk,1,2.5,,,0.01,100");
        assert_eq!(
            r.csv_row().split(',').count(),
            CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn trace_equality_ignores_throughput() {
        let a = rec();
        let mut b = rec();
        b.tokens_per_sec = 7.0;
        assert!(a.same_trace(&b));
        b.train_loss = 2.6;
        assert!(!a.same_trace(&b));
    }

    #[test]
    fn writer_creates_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), "run").unwrap();
        w.record(&rec()).unwrap();
        w.flush().unwrap();
        let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        let jsonl = std::fs::read_to_string(dir.path().join("run.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(v["data"]["mode"], "topk");
    }
}
