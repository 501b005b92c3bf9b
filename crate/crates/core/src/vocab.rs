//! Per-token perturbation table carried across batches, its file format and
//! the transfer of a trained table onto an embedding.
//!
//! File layout (little-endian): `b"TAVV"`, `u32` version, `u64` rows, `u64`
//! width, `rows * width` `f64` values, `u64` byte length of a JSON metadata
//! object, then the metadata bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vat::VocabPolicy;

const MAGIC: &[u8; 4] = b"TAVV";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabMeta {
    pub source_task: String,
    pub sigma: f64,
    pub epsilon: f64,
    pub steps_seen: u64,
    pub tokenizer_fingerprint: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationVocabulary {
    table: Tensor,
    pub meta: VocabMeta,
}

impl PerturbationVocabulary {
    /// Rows drawn as `(1/sqrt(dim)) * U(-sigma, sigma)`, padding row zero.
    pub fn init<R: Rng + ?Sized>(
        rows: usize,
        dim: usize,
        sigma: f64,
        meta: VocabMeta,
        rng: &mut R,
    ) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "perturbation vocabulary needs positive size, got {rows}x{dim}"
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        let mut table = Tensor::zeros(&[rows, dim]);
        if sigma > 0.0 {
            let scale = 1.0 / (dim as f64).sqrt();
            for (r, row) in table.data_mut().chunks_mut(dim).enumerate() {
                if r != PAD_ID {
                    for v in row {
                        *v = scale * rng.gen_range(-sigma..=sigma);
                    }
                }
            }
        }
        Ok(Self { table, meta })
    }

    pub fn from_table(table: Tensor, meta: VocabMeta) -> Result<Self> {
        if table.shape().len() != 2 || table.shape().contains(&0) {
            return Err(Error::shape(
                "perturbation vocabulary",
                format!("bad table shape {:?}", table.shape()),
            ));
        }
        if table.data()[..table.shape()[1]].iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidConfig(
                "padding row of a perturbation vocabulary must be zero".into(),
            ));
        }
        Ok(Self { table, meta })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f64] {
        let d = self.dim();
        &self.table.data()[id * d..(id + 1) * d]
    }

    /// `[batch, len, dim]` copy of the rows for each unpadded token.
    pub fn gather(
        &self,
        token_ids: &[usize],
        mask: &[bool],
        batch_size: usize,
        seq_len: usize,
    ) -> Result<Tensor> {
        if token_ids.len() != batch_size * seq_len || mask.len() != token_ids.len() {
            return Err(Error::shape(
                "gather",
                "token ids and mask must be batch x len",
            ));
        }
        let d = self.dim();
        let mut out = Tensor::zeros(&[batch_size, seq_len, d]);
        for ((dst, &id), &m) in out.data_mut().chunks_mut(d).zip(token_ids).zip(mask) {
            if id >= self.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.rows(),
                });
            }
            if m {
                dst.copy_from_slice(self.row(id));
            }
        }
        Ok(out)
    }

    /// Overwrites each permitted token's row with its final slice, averaging
    /// slices of a token that occurs more than once.
    pub fn scatter(
        &mut self,
        token_ids: &[usize],
        mask: &[bool],
        eta: &Tensor,
        policy: &VocabPolicy,
    ) -> Result<()> {
        let d = self.dim();
        if mask.len() != token_ids.len() || eta.len() != token_ids.len() * d {
            return Err(Error::shape(
                "scatter",
                format!(
                    "eta {:?} does not match {} positions of width {d}",
                    eta.shape(),
                    token_ids.len()
                ),
            ));
        }
        let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
        for ((slice, &id), &m) in eta.data().chunks(d).zip(token_ids).zip(mask) {
            if id >= self.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.rows(),
                });
            }
            if !m || !policy.permits(id) {
                continue;
            }
            let entry = sums.entry(id).or_insert_with(|| (vec![0.0; d], 0));
            for (a, b) in entry.0.iter_mut().zip(slice) {
                *a += b;
            }
            entry.1 += 1;
        }
        let data = self.table.data_mut();
        for (id, (sum, count)) in sums {
            let row = &mut data[id * d..(id + 1) * d];
            if count == 1 {
                row.copy_from_slice(&sum);
            } else {
                for (r, s) in row.iter_mut().zip(&sum) {
                    *r = s / count as f64;
                }
            }
        }
        self.meta.steps_seen += 1;
        Ok(())
    }

    /// Fails unless the table matches `rows x dim` and the tokenizer fingerprint.
    pub fn ensure_matches(&self, rows: usize, dim: usize, fingerprint: &str) -> Result<()> {
        if self.rows() != rows || self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: format!("{rows}x{dim}"),
                found: format!("{}x{}", self.rows(), self.dim()),
            });
        }
        if self.meta.tokenizer_fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fingerprint.to_string(),
                found: self.meta.tokenizer_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(24 + self.table.len() * 8 + 8 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in self.table.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |why: &str| Error::corrupt(origin, why);
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            let end = at
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt("truncated"))?;
            let s = &bytes[*at..end];
            *at = end;
            Ok(s)
        };
        let mut at = 0;
        if take(&mut at, 4)? != MAGIC {
            return Err(corrupt("not a perturbation vocabulary file"));
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let u64_at = |at: &mut usize| -> Result<usize> {
            let v = u64::from_le_bytes(take(at, 8)?.try_into().unwrap());
            usize::try_from(v).map_err(|_| corrupt("size overflow"))
        };
        let rows = u64_at(&mut at)?;
        let dim = u64_at(&mut at)?;
        let n = rows
            .checked_mul(dim)
            .filter(|&n| n > 0)
            .ok_or_else(|| corrupt("bad dimensions"))?;
        let raw = take(
            &mut at,
            n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?,
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let meta_len = u64_at(&mut at)?;
        let meta: VocabMeta = serde_json::from_slice(take(&mut at, meta_len)?)
            .map_err(|e| corrupt(&format!("metadata: {e}")))?;
        if at != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Self::from_table(Tensor::new(vec![rows, dim], data)?, meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }
}

/// `embedding + vocab.table`, as a new tensor.
pub fn apply_to_embedding(embedding: &Tensor, vocab: &PerturbationVocabulary) -> Result<Tensor> {
    if embedding.shape() != vocab.table.shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", embedding.shape()),
            found: format!("{:?}", vocab.table.shape()),
        });
    }
    let data = embedding
        .data()
        .iter()
        .zip(vocab.table.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(embedding.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(sigma: f64, seed: u64) -> PerturbationVocabulary {
        let meta = VocabMeta {
            source_task: "toy".into(),
            sigma,
            epsilon: 1.0,
            tokenizer_fingerprint: "abc".into(),
            ..Default::default()
        };
        PerturbationVocabulary::init(8, 3, sigma, meta, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
    }

    #[test]
    fn init_is_seeded_and_pads_zero() {
        assert_eq!(vocab(0.5, 1), vocab(0.5, 1));
        assert_ne!(vocab(0.5, 1), vocab(0.5, 2));
        let v = vocab(0.5, 1);
        assert!(v.row(PAD_ID).iter().all(|&x| x == 0.0));
        assert!(vocab(0.0, 1).table().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_mean_near_zero() {
        let meta = VocabMeta::default();
        let v =
            PerturbationVocabulary::init(1001, 100, 1.0, meta, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap();
        let vals = &v.table().data()[100..];
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = (1.0 / 100.0 / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn gather_copies_rows() {
        let v = vocab(0.5, 4);
        let t = v.gather(&[5, 5, 0], &[true, true, false], 1, 3).unwrap();
        assert_eq!(&t.data()[0..3], v.row(5));
        assert_eq!(&t.data()[3..6], v.row(5));
        assert_eq!(&t.data()[6..9], &[0.0; 3]);
        assert!(v.gather(&[9], &[true], 1, 1).is_err());
    }

    #[test]
    fn scatter_averages_collisions_and_respects_policy() {
        let mut v = vocab(0.5, 4);
        let before = v.clone();
        let eta = Tensor::new(
            vec![1, 4, 3],
            vec![1.0, 2.0, 3.0, 0.5, 0.5, 0.5, 3.0, 0.0, -1.0, 9.0, 9.0, 9.0],
        )
        .unwrap();
        let policy = VocabPolicy {
            include_special: false,
            ..Default::default()
        };
        v.scatter(&[5, 2, 5, 0], &[true, true, true, false], &eta, &policy)
            .unwrap();
        assert_eq!(v.row(5), &[2.0, 1.0, 1.0]);
        assert_eq!(v.row(2), before.row(2));
        assert_eq!(v.row(PAD_ID), &[0.0; 3]);
        assert_eq!(v.meta.steps_seen, 1);
    }

    #[test]
    fn fully_padded_scatter_is_a_no_op() {
        let mut v = vocab(0.5, 4);
        let before = v.table().clone();
        let eta = Tensor::new(vec![1, 2, 3], vec![1.0; 6]).unwrap();
        v.scatter(&[3, 4], &[false, false], &eta, &VocabPolicy::default())
            .unwrap();
        assert_eq!(v.table(), &before);
    }

    #[test]
    fn bytes_round_trip_and_reject_damage() {
        let v = vocab(0.3, 9);
        let bytes = v.to_bytes().unwrap();
        assert_eq!(bytes, v.to_bytes().unwrap());
        assert_eq!(
            PerturbationVocabulary::from_bytes(&bytes, "mem").unwrap(),
            v
        );
        assert!(PerturbationVocabulary::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PerturbationVocabulary::from_bytes(&bad, "mem").is_err());
        let mut bad = bytes;
        bad[4] = 7;
        assert!(PerturbationVocabulary::from_bytes(&bad, "mem").is_err());
    }

    #[test]
    fn compatibility_checks() {
        let v = vocab(0.3, 9);
        v.ensure_matches(8, 3, "abc").unwrap();
        assert!(matches!(
            v.ensure_matches(8, 4, "abc"),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            v.ensure_matches(8, 3, "xyz"),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn apply_is_additive() {
        let v = vocab(0.3, 9);
        let emb = Tensor::from_fn(&[8, 3], |i| i as f64 * 0.25);
        let zero = vocab(0.0, 1);
        assert_eq!(apply_to_embedding(&emb, &zero).unwrap(), emb);
        let twice = apply_to_embedding(&apply_to_embedding(&emb, &v).unwrap(), &v).unwrap();
        for ((t, e), x) in twice.data().iter().zip(emb.data()).zip(v.table().data()) {
            assert!((t - (e + 2.0 * x)).abs() < 1e-15);
        }
        assert!(apply_to_embedding(&Tensor::zeros(&[8, 4]), &v).is_err());
    }
}
