//! Line-delimited metric records.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    /// Reporting client in a federated run; `None` for server-side records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<usize>,
    pub phase: String,
    pub name: String,
    pub value: f64,
}

/// In-memory metric log with an optional append-only file mirror. Each
/// record is written as one complete JSON line and flushed.
#[derive(Debug, Default)]
pub struct Metrics {
    pub records: Vec<MetricRecord>,
    sink: Option<BufWriter<File>>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, iteration: usize, phase: &str, name: &str, value: f64) {
        self.push_record(MetricRecord {
            iteration,
            client: None,
            phase: phase.into(),
            name: name.into(),
            value,
        });
    }

    pub fn push_client(&mut self, round: usize, client: usize, name: &str, value: f64) {
        self.push_record(MetricRecord {
            iteration: round,
            client: Some(client),
            phase: "client".into(),
            name: name.into(),
            value,
        });
    }

    fn push_record(&mut self, rec: MetricRecord) {
        if let Some(w) = self.sink.as_mut() {
            let mut line = serde_json::to_string(&rec).unwrap_or_default();
            line.push('\n');
            if let Err(e) = w.write_all(line.as_bytes()).and_then(|_| w.flush()) {
                log::warn!("metrics sink write failed: {e}");
            }
        }
        self.records.push(rec);
    }

    /// Values of `name` in record order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.name == name)
            .map(|r| r.value)
            .collect()
    }
}

/// Mean squared error normalized by the target variance (population form).
pub fn nmse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = target.len() as f64;
    let mean = target.sum() / n;
    let var: f64 = target.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let mse: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    mse / var
}

/// Fraction of mismatched labels.
pub fn error_rate(pred: &[usize], truth: &[usize]) -> f64 {
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / truth.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn nmse_basics() {
        let y = array![[1.0], [2.0], [4.0]];
        assert_eq!(nmse(y.view(), y.view()), 0.0);
        let p = array![[1.5], [2.0], [3.0]];
        let scaled_y = y.mapv(|v| 10.0 * v);
        let scaled_p = p.mapv(|v| 10.0 * v);
        assert!((nmse(p.view(), y.view()) - nmse(scaled_p.view(), scaled_y.view())).abs() < 1e-14);
    }

    #[test]
    fn file_lines_are_complete_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut m = Metrics::with_file(&p).unwrap();
        m.push(1, "m_step", "noise_var", 0.5);
        m.push(2, "m_step", "noise_var", 0.25);
        m.push_client(2, 3, "count", 101.0);
        drop(m);
        let text = std::fs::read_to_string(&p).unwrap();
        let recs: Vec<MetricRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].value, 0.25);
        assert_eq!((recs[0].client, recs[2].client), (None, Some(3)));
        assert!(!text.lines().next().unwrap().contains("client"));
        assert_eq!(error_rate(&[1, 2, 3], &[1, 0, 3]), 1.0 / 3.0);
    }
}
