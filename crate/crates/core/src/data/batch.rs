use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::PAD_ID;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// One tag per token id, including the wrapping `[CLS]`/`[SEP]`.
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    Class(Vec<usize>),
    /// Flattened `[batch, len]`, `None` at padding.
    Tags(Vec<Option<usize>>),
}

/// A padded minibatch. `mask[i * seq_len + j]` is true exactly where the token is not padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub labels: Labels,
}

impl Batch {
    /// Pads `examples` to their longest sequence.
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch has no examples"));
        }
        let seq_len = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
        if seq_len == 0 || examples.iter().any(|e| e.ids.is_empty()) {
            return Err(Error::Empty("batch contains an example without tokens"));
        }
        let b = examples.len();
        let mut token_ids = vec![PAD_ID; b * seq_len];
        let mut mask = vec![false; b * seq_len];
        for (i, e) in examples.iter().enumerate() {
            for (j, &id) in e.ids.iter().enumerate() {
                token_ids[i * seq_len + j] = id;
                mask[i * seq_len + j] = id != PAD_ID;
            }
        }
        let labels = match &examples[0].label {
            Label::Class(_) => Labels::Class(
                examples
                    .iter()
                    .map(|e| match e.label {
                        Label::Class(c) => Ok(c),
                        Label::Tags(_) => Err(Error::Empty("mixed label kinds in batch")),
                    })
                    .collect::<Result<_>>()?,
            ),
            Label::Tags(_) => {
                let mut tags = vec![None; b * seq_len];
                for (i, e) in examples.iter().enumerate() {
                    let Label::Tags(t) = &e.label else {
                        return Err(Error::Empty("mixed label kinds in batch"));
                    };
                    if t.len() != e.ids.len() {
                        return Err(Error::Empty(
                            "tag sequence length differs from token sequence",
                        ));
                    }
                    for (j, &tag) in t.iter().enumerate() {
                        tags[i * seq_len + j] = Some(tag);
                    }
                }
                Labels::Tags(tags)
            }
        };
        Ok(Self {
            batch_size: b,
            seq_len,
            token_ids,
            mask,
            labels,
        })
    }

    pub fn example_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn example_ids(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Cross-entropy targets: one per example, or one per position for tagging.
    pub fn targets(&self) -> Vec<Option<usize>> {
        match &self.labels {
            Labels::Class(c) => c.iter().map(|&c| Some(c)).collect(),
            Labels::Tags(t) => t.clone(),
        }
    }
}

/// Groups `examples` into padded batches. With `shuffle_seed` the order is a
/// seeded permutation; the final partial batch is kept.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    Count(usize),
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subsample {
    pub examples: Vec<Example>,
    /// Class label (or, for tagging, example-level "has entity") → count.
    pub label_counts: BTreeMap<usize, usize>,
}

/// Uniform sampling without replacement; survivors keep their original order.
pub fn subsample(examples: &[Example], size: SampleSize, seed: u64) -> Result<Subsample> {
    let population = examples.len();
    let count = match size {
        SampleSize::Count(c) => c,
        SampleSize::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!(
                    "subsample fraction {f} outside [0, 1]"
                )));
            }
            (f * population as f64).round() as usize
        }
    };
    if count > population {
        return Err(Error::SubsampleTooLarge {
            requested: count,
            population,
        });
    }
    let mut picked =
        rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), population, count)
            .into_vec();
    picked.sort_unstable();
    let examples: Vec<Example> = picked.into_iter().map(|i| examples[i].clone()).collect();
    Ok(Subsample {
        label_counts: label_distribution(&examples),
        examples,
    })
}

pub fn label_distribution(examples: &[Example]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for e in examples {
        let key = match &e.label {
            Label::Class(c) => *c,
            Label::Tags(t) => usize::from(t.iter().any(|&x| x != 0)),
        };
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(len: usize, label: usize) -> Example {
        Example {
            ids: (0..len).map(|i| 4 + i).collect(),
            label: Label::Class(label),
        }
    }

    #[test]
    fn partial_batch_kept() {
        let examples: Vec<_> = (0..5).map(|i| ex(2 + i, i % 2)).collect();
        let batches = make_batches(&examples, 2, None).unwrap();
        let sizes: Vec<_> = batches.iter().map(|b| b.batch_size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn mask_counts_match_lengths() {
        let examples: Vec<_> = (0..6).map(|i| ex(1 + i, 0)).collect();
        for b in make_batches(&examples, 4, Some(3)).unwrap() {
            for i in 0..b.batch_size {
                let real = b.example_mask(i).iter().filter(|&&m| m).count();
                let unpadded = b.example_ids(i).iter().filter(|&&id| id != PAD_ID).count();
                assert_eq!(real, unpadded);
            }
        }
    }

    #[test]
    fn shuffle_is_seeded() {
        let examples: Vec<_> = (0..20).map(|i| ex(1 + i % 7, i)).collect();
        let a = make_batches(&examples, 3, Some(9)).unwrap();
        let b = make_batches(&examples, 3, Some(9)).unwrap();
        let c = make_batches(&examples, 3, Some(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(make_batches(&[ex(2, 0)], 0, None).is_err());
    }

    #[test]
    fn full_fraction_is_identity() {
        let examples: Vec<_> = (0..30).map(|i| ex(2, i % 3)).collect();
        let s = subsample(&examples, SampleSize::Fraction(1.0), 4).unwrap();
        assert_eq!(s.examples, examples);
        assert_eq!(s.label_counts.values().sum::<usize>(), 30);
    }

    #[test]
    fn exact_count_unique() {
        let examples: Vec<_> = (0..10_000)
            .map(|i| Example {
                ids: vec![i + 4],
                label: Label::Class(0),
            })
            .collect();
        let s = subsample(&examples, SampleSize::Count(2000), 1).unwrap();
        let mut ids: Vec<_> = s.examples.iter().map(|e| e.ids[0]).collect();
        ids.dedup();
        assert_eq!(ids.len(), 2000);
    }

    #[test]
    fn oversample_rejected() {
        let examples = vec![ex(2, 0); 3];
        assert!(matches!(
            subsample(&examples, SampleSize::Count(4), 0),
            Err(Error::SubsampleTooLarge {
                requested: 4,
                population: 3
            })
        ));
    }

    #[test]
    fn overlap_matches_hypergeometric_expectation() {
        // Two independent draws of k from n overlap by k^2/n in expectation,
        // with variance below k (k/n)(1 - k/n).
        let (n, k) = (10_000usize, 2000usize);
        let examples: Vec<_> = (0..n)
            .map(|i| Example {
                ids: vec![i + 4],
                label: Label::Class(0),
            })
            .collect();
        let a = subsample(&examples, SampleSize::Count(k), 11).unwrap();
        let b = subsample(&examples, SampleSize::Count(k), 12).unwrap();
        let set: std::collections::HashSet<_> = a.examples.iter().map(|e| e.ids[0]).collect();
        let overlap = b
            .examples
            .iter()
            .filter(|e| set.contains(&e.ids[0]))
            .count() as f64;
        let expected = (k * k) as f64 / n as f64;
        let sd = (k as f64 * (k as f64 / n as f64) * (1.0 - k as f64 / n as f64)).sqrt();
        assert!(
            (overlap - expected).abs() < 5.0 * sd,
            "overlap {overlap} vs {expected}"
        );
    }
}
