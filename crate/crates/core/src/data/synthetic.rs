//! Seeded synthetic tasks standing in for benchmark corpora.
//!
//! Classification: filler words with planted cue words; the label is the
//! class with the most cues, flipped to another class with probability
//! `noise`. Tagging: filler words with planted entity spans and BIO tags.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationTask {
    pub classes: usize,
    pub cues_per_class: usize,
    pub fillers: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_cues: usize,
    pub noise: f64,
}

impl Default for ClassificationTask {
    fn default() -> Self {
        Self {
            classes: 2,
            cues_per_class: 8,
            fillers: 120,
            min_words: 6,
            max_words: 14,
            max_cues: 3,
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextExample {
    pub words: Vec<String>,
    pub label: usize,
    /// Label before noise was applied.
    pub clean_label: usize,
}

pub fn filler_word(i: usize) -> String {
    format!("f{i}")
}

pub fn cue_word(class: usize, i: usize) -> String {
    format!("c{class}_{i}")
}

/// Parses a cue word back to its class.
pub fn cue_class(word: &str) -> Option<usize> {
    let rest = word.strip_prefix('c')?;
    let (class, idx) = rest.split_once('_')?;
    idx.parse::<usize>().ok()?;
    class.parse().ok()
}

impl ClassificationTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(Error::InvalidConfig(format!(
                "synthetic classification: {m}"
            )))
        };
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5)");
        }
        if self.cues_per_class == 0 || self.fillers == 0 || self.max_cues == 0 {
            return bad("cue, filler and max-cue counts must be positive");
        }
        if self.min_words < 2 * self.max_cues || self.max_words < self.min_words {
            return bad("word range must admit 2*max_cues words");
        }
        Ok(())
    }

    /// Every word the generator can emit, in a fixed order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = (0..self.fillers).map(filler_word).collect();
        for c in 0..self.classes {
            words.extend((0..self.cues_per_class).map(|i| cue_word(c, i)));
        }
        words
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<TextExample>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidConfig(
                "synthetic classification: n must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.sample(&mut rng)).collect())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> TextExample {
        let class = rng.gen_range(0..self.classes);
        let major = rng.gen_range(1..=self.max_cues);
        let minor = rng.gen_range(0..major);
        let other = (class + rng.gen_range(1..self.classes)) % self.classes;
        let len = rng.gen_range(self.min_words..=self.max_words);
        let mut words: Vec<String> = (0..len)
            .map(|_| filler_word(rng.gen_range(0..self.fillers)))
            .collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(rng);
        for (n, &slot) in slots.iter().take(major + minor).enumerate() {
            let c = if n < major { class } else { other };
            words[slot] = cue_word(c, rng.gen_range(0..self.cues_per_class));
        }
        let label = if rng.gen::<f64>() < self.noise {
            (class + rng.gen_range(1..self.classes)) % self.classes
        } else {
            class
        };
        TextExample {
            words,
            label,
            clean_label: class,
        }
    }
}

/// Predicts the class with the most cue words (ties to the lowest class).
pub fn cue_majority_oracle(words: &[String], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for w in words {
        if let Some(c) = cue_class(w).filter(|&c| c < classes) {
            counts[c] += 1;
        }
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaggingTask {
    pub entity_types: Vec<String>,
    pub words_per_type: usize,
    pub fillers: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_spans: usize,
    pub max_span_len: usize,
}

impl Default for TaggingTask {
    fn default() -> Self {
        Self {
            entity_types: vec!["PER".into(), "LOC".into()],
            words_per_type: 8,
            fillers: 80,
            min_words: 8,
            max_words: 14,
            max_spans: 2,
            max_span_len: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedExample {
    pub words: Vec<String>,
    /// Tag ids into [`TaggingTask::tag_names`], one per word.
    pub tags: Vec<usize>,
    /// Planted spans as `(start, len, entity type index)`.
    pub spans: Vec<(usize, usize, usize)>,
}

impl TaggingTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic tagging: {m}")));
        if self.entity_types.is_empty() || self.words_per_type == 0 || self.fillers == 0 {
            return bad("entity types, words per type and fillers must be non-empty");
        }
        if self.max_span_len == 0 || self.max_words < self.min_words || self.min_words == 0 {
            return bad("bad span or word range");
        }
        if self.min_words + 1 < self.max_spans * (self.max_span_len + 1) {
            return bad("min_words too small for the requested spans");
        }
        Ok(())
    }

    /// `O`, then `B-T`, `I-T` for each entity type.
    pub fn tag_names(&self) -> Vec<String> {
        let mut tags = vec!["O".to_string()];
        for t in &self.entity_types {
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        tags
    }

    fn begin_word(&self, ty: usize, i: usize) -> String {
        format!("{}_b{i}", self.entity_types[ty].to_lowercase())
    }

    fn inside_word(&self, ty: usize, i: usize) -> String {
        format!("{}_i{i}", self.entity_types[ty].to_lowercase())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = (0..self.fillers).map(filler_word).collect();
        for ty in 0..self.entity_types.len() {
            words.extend((0..self.words_per_type).map(|i| self.begin_word(ty, i)));
            words.extend((0..self.words_per_type).map(|i| self.inside_word(ty, i)));
        }
        words
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<TaggedExample>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidConfig(
                "synthetic tagging: n must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.sample(&mut rng)).collect())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> TaggedExample {
        let len = rng.gen_range(self.min_words..=self.max_words);
        let n_spans = rng.gen_range(0..=self.max_spans);
        let lens: Vec<usize> = (0..n_spans)
            .map(|_| rng.gen_range(1..=self.max_span_len))
            .collect();
        let types: Vec<usize> = (0..n_spans)
            .map(|_| rng.gen_range(0..self.entity_types.len()))
            .collect();
        // Distribute the free filler words into n_spans + 1 gaps, interior gaps at least one word.
        let used: usize = lens.iter().sum::<usize>() + n_spans.saturating_sub(1);
        let mut gaps = vec![0usize; n_spans + 1];
        for g in gaps.iter_mut().take(n_spans).skip(1) {
            *g = 1;
        }
        for _ in 0..len - used {
            gaps[rng.gen_range(0..=n_spans)] += 1;
        }
        let mut words = Vec::with_capacity(len);
        let mut tags = Vec::with_capacity(len);
        let mut spans = Vec::with_capacity(n_spans);
        for s in 0..=n_spans {
            for _ in 0..gaps[s] {
                words.push(filler_word(rng.gen_range(0..self.fillers)));
                tags.push(0);
            }
            if s < n_spans {
                spans.push((words.len(), lens[s], types[s]));
                for k in 0..lens[s] {
                    let i = rng.gen_range(0..self.words_per_type);
                    if k == 0 {
                        words.push(self.begin_word(types[s], i));
                        tags.push(1 + 2 * types[s]);
                    } else {
                        words.push(self.inside_word(types[s], i));
                        tags.push(2 + 2 * types[s]);
                    }
                }
            }
        }
        TaggedExample { words, tags, spans }
    }
}
