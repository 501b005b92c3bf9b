//! Small text classifier: token embeddings, a transformer (or mean-pool MLP)
//! encoder and a sequence- or token-level head.
//!
//! Perturbations enter between [`ModelParams::embed`] and
//! [`ModelParams::forward_from_embeddings`], i.e. after the complete embedding
//! computation (token lookup, plus positions and normalization when enabled).

mod checkpoint;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::data::Batch;
use crate::error::{ensure_finite, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Score given to masked attention keys; `exp` of it underflows to exactly zero.
const MASKED_SCORE: f64 = -1e30;

pub const EMBEDDING: &str = "embedding.tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    MeanPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One prediction per sequence from the masked mean of the encoder output.
    Sequence,
    /// One prediction per token (sequence labelling).
    Token,
}

/// Architecture knobs that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder: EncoderKind,
    /// Learned positions added to token embeddings, followed by a layer norm.
    pub positional: bool,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            encoder: EncoderKind::Transformer,
            positional: false,
            max_len: 64,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub vocab_size: usize,
    pub num_outputs: usize,
    pub head: HeadKind,
    pub config: ModelConfig,
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let bad = |m: String| Err(Error::InvalidConfig(format!("model: {m}")));
        if self.vocab_size < 2 || self.num_outputs < 2 {
            return bad(format!(
                "vocab {} and outputs {} must be >= 2",
                self.vocab_size, self.num_outputs
            ));
        }
        if c.dim == 0 || c.ffn_hidden == 0 || c.max_len == 0 {
            return bad("dim, ffn_hidden and max_len must be positive".into());
        }
        if c.encoder == EncoderKind::Transformer && (c.heads == 0 || !c.dim.is_multiple_of(c.heads))
        {
            return bad(format!(
                "dim {} not divisible into {} heads",
                c.dim, c.heads
            ));
        }
        if c.encoder == EncoderKind::MeanPool && self.head == HeadKind::Token {
            return bad("the mean-pool encoder has no per-token output".into());
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return bad(format!("dropout {} outside [0, 1)", c.dropout));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter, aligned with [`ModelParams::names`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Loss plus gradients with respect to every parameter and every perturbation input.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub param_grads: Vec<Vec<f64>>,
    pub input_grads: Vec<Vec<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| bound * (2.0 * rng.gen::<f64>() - 1.0))
}

impl ModelParams {
    /// Seeded initialization: uniform unit-variance embeddings (padding row zero),
    /// Glorot-uniform weights, zero biases, identity layer norms.
    pub fn init(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let c = hyper.config.clone();
        let d = c.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self {
            hyper,
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let glorot = |rng: &mut ChaCha8Rng, i: usize, o: usize| {
            uniform(rng, &[i, o], (6.0 / (i + o) as f64).sqrt())
        };

        let mut emb = uniform(&mut rng, &[p.hyper.vocab_size, d], 3f64.sqrt());
        emb.data_mut()[..d].fill(0.0);
        p.push(EMBEDDING, emb);
        if c.positional {
            p.push(
                "embedding.positions",
                uniform(&mut rng, &[c.max_len, d], 0.1),
            );
            p.push("embedding.norm.gamma", Tensor::from_fn(&[d], |_| 1.0));
            p.push("embedding.norm.beta", Tensor::zeros(&[d]));
        }
        let head_in = match c.encoder {
            EncoderKind::Transformer => {
                for l in 0..c.layers {
                    let n = |s: &str| format!("block{l}.{s}");
                    p.push(&n("ln1.gamma"), Tensor::from_fn(&[d], |_| 1.0));
                    p.push(&n("ln1.beta"), Tensor::zeros(&[d]));
                    for w in ["q", "k", "v", "o"] {
                        p.push(&n(&format!("attn.w{w}")), glorot(&mut rng, d, d));
                        p.push(&n(&format!("attn.b{w}")), Tensor::zeros(&[d]));
                    }
                    p.push(&n("ln2.gamma"), Tensor::from_fn(&[d], |_| 1.0));
                    p.push(&n("ln2.beta"), Tensor::zeros(&[d]));
                    p.push(&n("ffn.w1"), glorot(&mut rng, d, c.ffn_hidden));
                    p.push(&n("ffn.b1"), Tensor::zeros(&[c.ffn_hidden]));
                    p.push(&n("ffn.w2"), glorot(&mut rng, c.ffn_hidden, d));
                    p.push(&n("ffn.b2"), Tensor::zeros(&[d]));
                }
                p.push("final_norm.gamma", Tensor::from_fn(&[d], |_| 1.0));
                p.push("final_norm.beta", Tensor::zeros(&[d]));
                d
            }
            EncoderKind::MeanPool => {
                p.push("mlp.w1", glorot(&mut rng, d, c.ffn_hidden));
                p.push("mlp.b1", Tensor::zeros(&[c.ffn_hidden]));
                c.ffn_hidden
            }
        };
        let outputs = p.hyper.num_outputs;
        p.push("head.w", glorot(&mut rng, head_in, outputs));
        p.push("head.b", Tensor::zeros(&[outputs]));
        Ok(p)
    }

    pub(crate) fn from_parts(
        hyper: ModelHyper,
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        let reference = Self::init(hyper.clone(), 0)?;
        if reference.names != names {
            return Err(Error::DimensionMismatch {
                expected: format!("parameters {:?}", reference.names),
                found: format!("{names:?}"),
            });
        }
        for ((n, r), t) in names.iter().zip(&reference.tensors).zip(&tensors) {
            if r.shape() != t.shape() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{n} {:?}", r.shape()),
                    found: format!("{:?}", t.shape()),
                });
            }
        }
        Ok(Self {
            hyper,
            names,
            tensors,
        })
    }

    fn push(&mut self, name: &str, t: Tensor) {
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn embedding(&self) -> &Tensor {
        self.get(EMBEDDING).expect("embedding table always present")
    }

    pub fn embedding_mut(&mut self) -> &mut Tensor {
        self.get_mut(EMBEDDING)
            .expect("embedding table always present")
    }

    pub fn dim(&self) -> usize {
        self.hyper.config.dim
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Concatenation of all parameters in [`names`](Self::names) order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} scalars", self.num_scalars()),
                found: flat.len().to_string(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ensure_finite(&format!("parameter {n}"), t.data())?;
        }
        Ok(())
    }

    /// Records every parameter as a differentiable leaf.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Records every parameter as a constant (inference only).
    pub fn register_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    fn var(&self, vars: &ParamVars, name: &str) -> Var {
        vars.0[self
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    /// Embedding output `[batch, len, dim]`.
    pub fn embed(&self, g: &mut Graph, vars: &ParamVars, batch: &Batch) -> Result<Var> {
        let (b, l) = (batch.batch_size, batch.seq_len);
        let x = g.embedding_lookup(self.var(vars, EMBEDDING), &batch.token_ids, &[b, l])?;
        if !self.hyper.config.positional {
            return Ok(x);
        }
        if l > self.hyper.config.max_len {
            return Err(Error::shape(
                "embed",
                format!(
                    "sequence length {l} exceeds max_len {}",
                    self.hyper.config.max_len
                ),
            ));
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.embedding_lookup(self.var(vars, "embedding.positions"), &positions, &[b, l])?;
        let x = g.add(x, pos)?;
        g.layer_norm(
            x,
            self.var(vars, "embedding.norm.gamma"),
            self.var(vars, "embedding.norm.beta"),
        )
    }

    fn dense(&self, g: &mut Graph, vars: &ParamVars, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(vars, w))?;
        g.add(y, self.var(vars, b))
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.hyper.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        let m = g.constant(mask);
        g.mul(x, m)
    }

    fn attention(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        x: Var,
        batch: &Batch,
        l_idx: usize,
    ) -> Result<Var> {
        let (b, l, d) = (batch.batch_size, batch.seq_len, self.dim());
        let h = self.hyper.config.heads;
        let dh = d / h;
        let n = |s: &str| format!("block{l_idx}.attn.{s}");
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, l, h, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = self.dense(g, vars, x, &n("wq"), &n("bq"))?;
        let k = self.dense(g, vars, x, &n("wk"), &n("bk"))?;
        let v = self.dense(g, vars, x, &n("wv"), &n("bv"))?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let kt = g.permute(k, &[0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let mut keep = Vec::with_capacity(b * h * l * l);
        for bi in 0..b {
            let key_mask = batch.example_mask(bi);
            for _ in 0..h * l {
                keep.extend_from_slice(key_mask);
            }
        }
        let scores = g.mask_fill(scores, &keep, MASKED_SCORE)?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        self.dense(g, vars, ctx, &n("wo"), &n("bo"))
    }

    /// Logits from (possibly perturbed) embeddings `x` of shape `[batch, len, dim]`:
    /// `[batch, outputs]` for the sequence head, `[batch * len, outputs]` for the token head.
    /// Padded positions never influence the result.
    pub fn forward_from_embeddings(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        x: Var,
        batch: &Batch,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let (b, l, d) = (batch.batch_size, batch.seq_len, self.dim());
        if g.shape(x) != [b, l, d] {
            return Err(Error::shape(
                "forward_from_embeddings",
                format!("expected [{b}, {l}, {d}], got {:?}", g.shape(x)),
            ));
        }
        if batch.mask.len() != b * l {
            return Err(Error::shape(
                "forward_from_embeddings",
                "mask does not match batch",
            ));
        }
        let c = &self.hyper.config;
        let features = match c.encoder {
            EncoderKind::Transformer => {
                let mut x = x;
                for li in 0..c.layers {
                    let n = |s: &str| format!("block{li}.{s}");
                    let h = g.layer_norm(
                        x,
                        self.var(vars, &n("ln1.gamma")),
                        self.var(vars, &n("ln1.beta")),
                    )?;
                    let a = self.attention(g, vars, h, batch, li)?;
                    let a = self.dropout(g, a, &mut dropout_rng)?;
                    x = g.add(x, a)?;
                    let h = g.layer_norm(
                        x,
                        self.var(vars, &n("ln2.gamma")),
                        self.var(vars, &n("ln2.beta")),
                    )?;
                    let f = self.dense(g, vars, h, &n("ffn.w1"), &n("ffn.b1"))?;
                    let f = g.relu(f)?;
                    let f = self.dense(g, vars, f, &n("ffn.w2"), &n("ffn.b2"))?;
                    let f = self.dropout(g, f, &mut dropout_rng)?;
                    x = g.add(x, f)?;
                }
                let x = g.layer_norm(
                    x,
                    self.var(vars, "final_norm.gamma"),
                    self.var(vars, "final_norm.beta"),
                )?;
                match self.hyper.head {
                    HeadKind::Sequence => g.masked_mean_pool(x, &batch.mask)?,
                    HeadKind::Token => g.reshape(x, &[b * l, d])?,
                }
            }
            EncoderKind::MeanPool => {
                let pooled = g.masked_mean_pool(x, &batch.mask)?;
                let h = self.dense(g, vars, pooled, "mlp.w1", "mlp.b1")?;
                let h = g.relu(h)?;
                self.dropout(g, h, &mut dropout_rng)?
            }
        };
        self.dense(g, vars, features, "head.w", "head.b")
    }

    pub fn loss(&self, g: &mut Graph, logits: Var, batch: &Batch) -> Result<Var> {
        g.cross_entropy(logits, &batch.targets())
    }

    /// One forward/backward pass at `embed(batch) + sum(perturbations)`.
    /// Each perturbation is `[batch, len, dim]`; all of them receive gradients.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        perturbations: &[&Tensor],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<LossAndGrads> {
        let mut g = Graph::new();
        let vars = self.register(&mut g);
        let mut x = self.embed(&mut g, &vars, batch)?;
        let mut pvars = Vec::with_capacity(perturbations.len());
        for p in perturbations {
            let v = g.param((*p).clone());
            x = g.add(x, v)?;
            pvars.push(v);
        }
        let logits = self.forward_from_embeddings(&mut g, &vars, x, batch, dropout_rng)?;
        let loss = self.loss(&mut g, logits, batch)?;
        let loss_value = g.data(loss)[0];
        ensure_finite("loss", &[loss_value])?;
        g.backward(loss)?;
        let take = |g: &mut Graph, v: Var| {
            g.take_grad(v)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        };
        let param_grads = vars.0.iter().map(|&v| take(&mut g, v)).collect();
        let input_grads = pvars.iter().map(|&v| take(&mut g, v)).collect();
        Ok(LossAndGrads {
            loss: loss_value,
            param_grads,
            input_grads,
        })
    }

    /// Inference logits without recording gradients.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register_frozen(&mut g);
        let x = self.embed(&mut g, &vars, batch)?;
        let logits = self.forward_from_embeddings(&mut g, &vars, x, batch, None)?;
        Ok(g.value(logits).clone())
    }

    /// Argmax predictions: one per example, or one per position for the token head.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let c = self.hyper.num_outputs;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}
