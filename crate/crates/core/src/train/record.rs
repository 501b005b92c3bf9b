//! Line-delimited JSON metrics stream.
//!
//! Every line is one object with a `kind` of `step`, `eval` or `summary` and
//! a `schema` version. A run writes one `step` line per batch update, one
//! `eval` line per dev evaluation and a final `summary` line.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub mean: f64,
    pub max: f64,
}

impl NormSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub examples: usize,
    /// Mean cross-entropy over scored rows.
    pub loss: f64,
    /// Example accuracy, or token accuracy for tagging.
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<SpanScores>,
}

impl EvalMetrics {
    /// Span F1 for tagging, accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.spans.map_or(self.accuracy, |s| s.f1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step {
        schema: u32,
        epoch: usize,
        batch: usize,
        inner_losses: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta_norm: Option<NormSummary>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eta_norm: Option<NormSummary>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_ms: Option<f64>,
    },
    Eval {
        schema: u32,
        epoch: usize,
        /// Batches completed in this epoch when the evaluation ran.
        batch: usize,
        split: String,
        metrics: EvalMetrics,
    },
    Summary(Summary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub steps: usize,
    /// Mean over steps of the last inner-step loss.
    pub mean_final_inner_loss: Option<f64>,
    pub dev: EvalMetrics,
    /// Best dev score across evaluations, by [`EvalMetrics::primary`].
    pub best_dev_primary: f64,
}

impl Summary {
    /// Rebuilds the summary from the step and eval records that precede it.
    /// `final_dev` is the last evaluation of the run; it is needed when the
    /// stream holds no eval record (zero epochs).
    pub fn from_records(
        records: &[MetricsRecord],
        seeds: Vec<u64>,
        epochs: usize,
        final_dev: Option<&EvalMetrics>,
    ) -> Result<Self> {
        let mut steps = 0;
        let mut loss_sum = 0.0;
        let mut last_eval = None;
        let mut best = f64::NEG_INFINITY;
        for r in records {
            match r {
                MetricsRecord::Step { inner_losses, .. } => {
                    steps += 1;
                    loss_sum += inner_losses.last().copied().unwrap_or(f64::NAN);
                }
                MetricsRecord::Eval { metrics, .. } => {
                    best = best.max(metrics.primary());
                    last_eval = Some(metrics);
                }
                MetricsRecord::Summary(_) => {}
            }
        }
        let dev = final_dev
            .or(last_eval)
            .cloned()
            .ok_or(Error::Empty("metrics stream has no evaluation"))?;
        Ok(Self {
            schema: SCHEMA_VERSION,
            seeds,
            epochs,
            steps,
            mean_final_inner_loss: (steps > 0).then(|| loss_sum / steps as f64),
            best_dev_primary: best.max(dev.primary()),
            dev,
        })
    }
}

/// Append-only writer that flushes after every record.
pub struct MetricsWriter {
    out: Option<File>,
}

impl MetricsWriter {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        Ok(Self {
            out: path.map(File::create).transpose()?,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(f) = self.out.as_mut() {
            let mut line = serde_json::to_vec(record)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                line: i as u64 + 1,
                reason: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(losses: Vec<f64>) -> MetricsRecord {
        MetricsRecord::Step {
            schema: SCHEMA_VERSION,
            epoch: 0,
            batch: 0,
            inner_losses: losses,
            final_loss: None,
            delta_norm: NormSummary::of(&[0.5, 1.0]),
            eta_norm: None,
            wall_ms: None,
        }
    }

    #[test]
    fn records_round_trip_through_json() {
        let r = step(vec![0.1, 0.2 + 1e-17, 1.0 / 3.0]);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"kind\":\"step\""));
        assert_eq!(serde_json::from_str::<MetricsRecord>(&s).unwrap(), r);
    }

    #[test]
    fn summary_from_records() {
        let dev = EvalMetrics {
            examples: 4,
            loss: 0.3,
            accuracy: 0.75,
            spans: None,
        };
        let records = vec![
            step(vec![1.0, 2.0]),
            step(vec![3.0, 4.0]),
            MetricsRecord::Eval {
                schema: SCHEMA_VERSION,
                epoch: 0,
                batch: 2,
                split: "dev".into(),
                metrics: dev.clone(),
            },
        ];
        let s = Summary::from_records(&records, vec![1, 2], 1, None).unwrap();
        assert_eq!(s.steps, 2);
        assert_eq!(s.mean_final_inner_loss, Some(3.0));
        assert_eq!(s.dev, dev);
        assert!(Summary::from_records(&records[..2], vec![], 1, None).is_err());
    }
}
