//! Toggle grids run over shared seeds, reported as one row per toggle vector.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::vat::{AdvMode, VocabPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Perturbation vocabulary x token normalization, four rows.
    VocabTokenNorm,
    /// Which tokens write to the vocabulary: special and normal, normal only, special only.
    SpecialTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: BTreeMap<String, bool>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: AblationGrid,
    pub metric: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| setting | mean {} | std | per seed |\n|---|---|---|---|\n",
            self.metric
        );
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {} |\n",
                r.label,
                r.mean,
                r.std,
                seeds.join(", ")
            ));
        }
        s
    }
}

impl AblationGrid {
    /// `(label, toggles, config)` for every row.
    pub fn rows(self, base: &TrainConfig) -> Vec<(String, BTreeMap<String, bool>, TrainConfig)> {
        let mut out = Vec::new();
        match self {
            AblationGrid::VocabTokenNorm => {
                for (vocab, tok) in [(true, true), (false, true), (true, false), (false, false)] {
                    let mut c = base.clone();
                    c.adv.mode = AdvMode::TaVat;
                    c.adv.use_vocab = vocab;
                    c.adv.use_token_norm = tok;
                    let label = format!("ptb_vocab={} tok_norm={}", on(vocab), on(tok));
                    let toggles = BTreeMap::from([
                        ("ptb_vocab".to_string(), vocab),
                        ("tok_norm".to_string(), tok),
                    ]);
                    out.push((label, toggles, c));
                }
            }
            AblationGrid::SpecialTokens => {
                for (label, special, normal) in [
                    ("ST+NT", true, true),
                    ("NT", false, true),
                    ("ST", true, false),
                ] {
                    let mut c = base.clone();
                    c.adv.mode = AdvMode::TaVat;
                    c.adv.use_vocab = true;
                    c.adv.use_token_norm = true;
                    c.adv.vocab_policy = VocabPolicy {
                        include_special: special,
                        include_normal: normal,
                        ..base.adv.vocab_policy.clone()
                    };
                    let toggles = BTreeMap::from([
                        ("special_tokens".to_string(), special),
                        ("normal_tokens".to_string(), normal),
                    ]);
                    out.push((label.to_string(), toggles, c));
                }
            }
        }
        out
    }
}

fn on(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Trains every row of `grid` for each replicate in `replicates`, all rows
/// sharing the replicate's seeds. Runs execute in parallel; results do not
/// depend on scheduling.
pub fn run_ablation(
    base: &TrainConfig,
    grid: AblationGrid,
    replicates: &[u64],
) -> Result<AblationTable> {
    if replicates.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs at least one seed replicate".into(),
        ));
    }
    let rows = grid.rows(base);
    let jobs: Vec<(usize, TrainConfig)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, (_, _, cfg))| {
            replicates.iter().map(move |&r| {
                let mut c = cfg.clone();
                c.seeds = cfg.seeds.replicate(r);
                c.output_dir = None;
                c.save_ptb_vocab = None;
                c.emit.eval_every_epoch = false;
                (i, c)
            })
        })
        .collect();
    let results =
        crate::parallel::map_ordered(&jobs, |(_, c)| train(c).map(|o| o.summary.dev.primary()));
    let mut per_row: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    for ((i, _), r) in jobs.iter().zip(results) {
        per_row[*i].push(r?);
    }
    let metric = match base.data.source {
        crate::data::DataSource::SyntheticTagging { .. } => "span_f1",
        _ => "accuracy",
    };
    Ok(AblationTable {
        grid,
        metric: metric.into(),
        rows: rows
            .into_iter()
            .zip(per_row)
            .map(|((label, toggles, _), per_seed)| {
                let (mean, std) = mean_std(&per_seed);
                AblationRow {
                    label,
                    toggles,
                    per_seed,
                    mean,
                    std,
                }
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_expected_rows() {
        let base = TrainConfig::default();
        assert_eq!(AblationGrid::VocabTokenNorm.rows(&base).len(), 4);
        assert_eq!(AblationGrid::SpecialTokens.rows(&base).len(), 3);
        let (_, t, c) = &AblationGrid::VocabTokenNorm.rows(&base)[3];
        assert!(!t["ptb_vocab"] && !t["tok_norm"]);
        assert!(!c.adv.use_vocab && !c.adv.use_token_norm);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
