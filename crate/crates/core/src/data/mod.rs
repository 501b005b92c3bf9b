//! Tokenization, dataset construction, batching and subsampling.

mod batch;
mod delimited;
pub mod synthetic;
mod tokenizer;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{
    label_distribution, make_batches, subsample, Batch, Example, Label, Labels, SampleSize,
    Subsample,
};
pub use delimited::{load_delimited, read_rows, DelimitedSpec, Row};
pub use synthetic::{ClassificationTask, TaggingTask};
pub use tokenizer::{Tokenizer, CLS_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    SyntheticClassification {
        #[serde(default)]
        task: ClassificationTask,
    },
    SyntheticTagging {
        #[serde(default)]
        task: TaggingTask,
    },
    Delimited {
        train: DelimitedSpec,
        /// Separate dev file; when absent, `dev_size` rows are split off the training file.
        #[serde(default)]
        dev: Option<DelimitedSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Examples generated for training (synthetic sources only).
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_dev_size")]
    pub dev_size: usize,
    /// Optional low-resource subsample of the training split.
    #[serde(default)]
    pub subsample: Option<SampleSize>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub lowercase: bool,
}

fn default_train_size() -> usize {
    2000
}
fn default_dev_size() -> usize {
    500
}
fn default_max_len() -> usize {
    64
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::SyntheticClassification {
                task: ClassificationTask::default(),
            },
            train_size: default_train_size(),
            dev_size: default_dev_size(),
            subsample: None,
            max_len: default_max_len(),
            lowercase: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Tagging { tags: Vec<String> },
}

impl TaskKind {
    pub fn num_outputs(&self) -> usize {
        match self {
            TaskKind::Classification { classes } => *classes,
            TaskKind::Tagging { tags } => tags.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub task: TaskKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub train_label_counts: BTreeMap<usize, usize>,
}

/// Seeds that fully determine every example and split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataSeeds {
    pub corpus: u64,
    pub split: u64,
}

/// Splits `items` into (train, dev) with `dev` rows chosen by a seeded permutation.
fn split<T: Clone>(items: Vec<T>, dev: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if dev >= items.len() {
        return Err(Error::InvalidConfig(format!(
            "dev split of {dev} leaves no training data out of {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; items.len()];
    order[..dev].iter().for_each(|&i| is_dev[i] = true);
    let (mut tr, mut dv) = (Vec::new(), Vec::new());
    for (item, d) in items.into_iter().zip(is_dev) {
        if d {
            dv.push(item)
        } else {
            tr.push(item)
        }
    }
    Ok((tr, dv))
}

pub fn build_dataset(spec: &DatasetSpec, seeds: DataSeeds) -> Result<Dataset> {
    if spec.max_len < 3 {
        return Err(Error::InvalidConfig("max_len must be at least 3".into()));
    }
    let (tokenizer, task, train, dev) = match &spec.source {
        DataSource::SyntheticClassification { task } => {
            let tokenizer = Tokenizer::from_tokens(task.vocabulary(), spec.lowercase);
            let raw = task.generate(spec.train_size + spec.dev_size, seeds.corpus)?;
            let examples: Vec<Example> = raw
                .iter()
                .map(|e| Example {
                    ids: tokenizer.encode_words(e.words.iter().map(String::as_str), spec.max_len),
                    label: Label::Class(e.label),
                })
                .collect();
            let (train, dev) = split(examples, spec.dev_size, seeds.split)?;
            (
                tokenizer,
                TaskKind::Classification {
                    classes: task.classes,
                },
                train,
                dev,
            )
        }
        DataSource::SyntheticTagging { task } => {
            let tokenizer = Tokenizer::from_tokens(task.vocabulary(), spec.lowercase);
            let raw = task.generate(spec.train_size + spec.dev_size, seeds.corpus)?;
            let examples: Vec<Example> = raw
                .iter()
                .map(|e| {
                    let ids =
                        tokenizer.encode_words(e.words.iter().map(String::as_str), spec.max_len);
                    // [CLS] and [SEP] are tagged O; truncation drops trailing words.
                    let mut tags = vec![0];
                    tags.extend(e.tags.iter().take(ids.len() - 2));
                    tags.push(0);
                    Example {
                        ids,
                        label: Label::Tags(tags),
                    }
                })
                .collect();
            let (train, dev) = split(examples, spec.dev_size, seeds.split)?;
            (
                tokenizer,
                TaskKind::Tagging {
                    tags: task.tag_names(),
                },
                train,
                dev,
            )
        }
        DataSource::Delimited { train, dev } => {
            let train_rows = read_rows(train)?;
            let tokenizer =
                Tokenizer::from_corpus(train_rows.iter().map(|r| r.text.as_str()), spec.lowercase)?;
            let classes = train.labels.len();
            let encode = |rows: &[Row]| -> Vec<Example> {
                rows.iter()
                    .map(|r| Example {
                        ids: tokenizer.encode_truncated(&r.text, spec.max_len),
                        label: Label::Class(r.label),
                    })
                    .collect()
            };
            let (tr, dv) = match dev {
                Some(dev_spec) => (encode(&train_rows), encode(&read_rows(dev_spec)?)),
                None => split(encode(&train_rows), spec.dev_size, seeds.split)?,
            };
            (tokenizer, TaskKind::Classification { classes }, tr, dv)
        }
    };
    let train = match spec.subsample {
        Some(size) => subsample(&train, size, seeds.split)?.examples,
        None => train,
    };
    if train.is_empty() {
        return Err(Error::Empty("training split is empty"));
    }
    Ok(Dataset {
        train_label_counts: label_distribution(&train),
        tokenizer,
        task,
        train,
        dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_sized() {
        let spec = DatasetSpec {
            train_size: 300,
            dev_size: 100,
            ..Default::default()
        };
        let ds = build_dataset(
            &spec,
            DataSeeds {
                corpus: 1,
                split: 2,
            },
        )
        .unwrap();
        assert_eq!(ds.train.len(), 300);
        assert_eq!(ds.dev.len(), 100);
        assert_eq!(ds.task, TaskKind::Classification { classes: 2 });
    }

    #[test]
    fn subsample_applies_to_train_only() {
        let spec = DatasetSpec {
            train_size: 300,
            dev_size: 100,
            subsample: Some(SampleSize::Count(40)),
            ..Default::default()
        };
        let ds = build_dataset(
            &spec,
            DataSeeds {
                corpus: 1,
                split: 2,
            },
        )
        .unwrap();
        assert_eq!(ds.train.len(), 40);
        assert_eq!(ds.dev.len(), 100);
        assert_eq!(ds.train_label_counts.values().sum::<usize>(), 40);
    }

    #[test]
    fn tagging_labels_align() {
        let spec = DatasetSpec {
            source: DataSource::SyntheticTagging {
                task: TaggingTask::default(),
            },
            train_size: 50,
            dev_size: 10,
            ..Default::default()
        };
        let ds = build_dataset(
            &spec,
            DataSeeds {
                corpus: 3,
                split: 4,
            },
        )
        .unwrap();
        for e in ds.train.iter().chain(&ds.dev) {
            let Label::Tags(t) = &e.label else { panic!() };
            assert_eq!(t.len(), e.ids.len());
            assert_eq!((t[0], *t.last().unwrap()), (0, 0));
        }
    }

    #[test]
    fn identical_seeds_identical_data() {
        let spec = DatasetSpec::default();
        let s = DataSeeds {
            corpus: 8,
            split: 9,
        };
        let (a, b) = (
            build_dataset(&spec, s).unwrap(),
            build_dataset(&spec, s).unwrap(),
        );
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
    }
}
