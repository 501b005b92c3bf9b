//! Evaluation scores: accuracy with a confusion matrix, and exact-match span F1 for BIO tags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `matrix[gold][pred]` counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            matrix: vec![vec![0; classes]; classes],
        }
    }

    pub fn record(&mut self, gold: usize, pred: usize) -> Result<()> {
        let classes = self.matrix.len();
        for label in [gold, pred] {
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes,
                    row: 0,
                });
            }
        }
        self.matrix[gold][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.matrix.len()).map(|i| self.matrix[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// An entity span `[start, end)` of a given type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// Extracts spans from BIO tag strings. An `I-X` that does not continue an
/// open `X` span starts a new one, as conlleval does.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, kind) = match tag.split_once('-') {
            Some((p, k)) if p == "B" || p == "I" => (p, k),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|(_, k)| k == kind);
        if !continues {
            if let Some((start, k)) = open.take() {
                spans.push(Span {
                    start,
                    end: i,
                    kind: k,
                });
            }
            if prefix != "O" {
                open = Some((i, kind.to_string()));
            }
        }
    }
    if let Some((start, kind)) = open {
        spans.push(Span {
            start,
            end: tags.len(),
            kind,
        });
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub gold: u64,
    pub predicted: u64,
    pub matched: u64,
}

impl SpanCounts {
    pub fn add<S: AsRef<str>>(&mut self, gold: &[S], predicted: &[S]) {
        let g = bio_spans(gold);
        let p = bio_spans(predicted);
        self.gold += g.len() as u64;
        self.predicted += p.len() as u64;
        self.matched += p.iter().filter(|s| g.contains(s)).count() as u64;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
