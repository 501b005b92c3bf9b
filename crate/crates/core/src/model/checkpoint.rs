//! Binary checkpoint format (all integers and reals little-endian):
//!
//! ```text
//! magic "TAVM" | version u32
//! hyper block: vocab_size u64, num_outputs u64, dim u64, layers u64, heads u64,
//!              ffn_hidden u64, max_len u64, encoder u8, head u8, positional u8,
//!              reserved u8, dropout f64, seed count u32, seeds u64 * count
//! tensor count u32
//! per tensor: name length u32, name bytes (UTF-8), rank u32, dims u64 * rank, data f64 * prod(dims)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{EncoderKind, HeadKind, ModelConfig, ModelHyper, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TAVM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Run seeds, recorded verbatim.
    pub seeds: Vec<u64>,
}

pub fn write_checkpoint(params: &ModelParams, seeds: &[u64], out: &mut impl Write) -> Result<()> {
    let h = &params.hyper;
    let c = &h.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        h.vocab_size,
        h.num_outputs,
        c.dim,
        c.layers,
        c.heads,
        c.ffn_hidden,
        c.max_len,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let encoder = match c.encoder {
        EncoderKind::Transformer => 0u8,
        EncoderKind::MeanPool => 1,
    };
    let head = match h.head {
        HeadKind::Sequence => 0u8,
        HeadKind::Token => 1,
    };
    buf.extend_from_slice(&[encoder, head, c.positional as u8, 0]);
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.extend_from_slice(&(seeds.len() as u32).to_le_bytes());
    for s in seeds {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(&(params.names().len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, seeds: &[u64], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_checkpoint(params, seeds, &mut f)?;
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::corrupt(self.path, "size overflows usize"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let (vocab_size, num_outputs, dim, layers, heads, ffn_hidden, max_len) = (
        r.usize()?,
        r.usize()?,
        r.usize()?,
        r.usize()?,
        r.usize()?,
        r.usize()?,
        r.usize()?,
    );
    let encoder = match r.u8()? {
        0 => EncoderKind::Transformer,
        1 => EncoderKind::MeanPool,
        e => return Err(Error::corrupt(path, format!("unknown encoder tag {e}"))),
    };
    let head = match r.u8()? {
        0 => HeadKind::Sequence,
        1 => HeadKind::Token,
        h => return Err(Error::corrupt(path, format!("unknown head tag {h}"))),
    };
    let positional = r.u8()? != 0;
    r.u8()?;
    let dropout = r.f64()?;
    let seed_count = r.u32()? as usize;
    let seeds = (0..seed_count)
        .map(|_| r.u64())
        .collect::<Result<Vec<_>>>()?;
    let hyper = ModelHyper {
        vocab_size,
        num_outputs,
        head,
        config: ModelConfig {
            dim,
            layers,
            heads,
            ffn_hidden,
            encoder,
            positional,
            max_len,
            dropout,
        },
    };
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::corrupt(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::corrupt(path, format!("tensor {name} is too large")))?;
        if n > (bytes.len() - r.pos) / 8 {
            return Err(Error::corrupt(
                path,
                format!("tensor {name} data truncated"),
            ));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::corrupt(path, e.to_string()))?);
        names.push(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after last tensor"));
    }
    let params = ModelParams::from_parts(hyper, names, tensors)?;
    Ok(Checkpoint { params, seeds })
}
