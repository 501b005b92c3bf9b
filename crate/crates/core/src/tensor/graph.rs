use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor for layer normalization; rows below it normalize to zero.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    /// Produced from inputs that do not require gradients.
    Constant,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Relu {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Softmax {
        a: Var,
    },
    EmbeddingLookup {
        table: Var,
        ids: Vec<usize>,
    },
    MaskFill {
        a: Var,
        keep: Vec<bool>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    MaskedMeanPool {
        a: Var,
        keep: Vec<bool>,
        counts: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A dynamic tape: nodes are appended in evaluation order, so every node's
/// inputs precede it and a reverse scan is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

fn dims(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward fills its gradient slot.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.requiring_grad())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let needs_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let mut value = Tensor::new(shape, data)?;
        value.set_requires_grad(needs_grad);
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Elementwise sum. `b` may match `a` exactly or match a trailing suffix of
    /// `a`'s shape, in which case it is repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{} + {}", dims(&sa), dims(sb))));
        }
        let bd = self.data(b);
        let n = bd.len();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % n])
            .collect();
        self.push(sa, data, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{} * {}", dims(&sa), dims(self.shape(b))),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(sa, data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale { a, factor }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu { a }, &[a])
    }

    /// `[.., m, k] x [k, n]` (shared right operand) or `[.., m, k] x [.., k, n]`
    /// with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("rank < 2: {} x {}", dims(&sa), dims(&sb)),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batched = sb.len() > 2;
        if kb != k || (batched && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(Error::shape(
                "matmul",
                format!("cannot contract {} with {}", dims(&sa), dims(&sb)),
            ));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let rows: usize = sa[..sa.len() - 2].iter().product::<usize>() * m;
        let mut out = vec![0.0; rows * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            parallel::for_each_row(&mut out, n, rows * k * n, |r, row| {
                let arow = &ad[r * k..(r + 1) * k];
                let boff = if batched { (r / m) * k * n } else { 0 };
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &bd[boff + kk * n..boff + (kk + 1) * n];
                    row.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
                }
            });
        }
        self.push(out_shape, out, Op::MatMul { a, b, batched }, &[a, b])
    }

    /// Normalizes over the last dimension, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {} with gamma {} and beta {}",
                    dims(&shape),
                    dims(self.shape(gamma)),
                    dims(self.shape(beta))
                ),
            ));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is_floored = var < LAYER_NORM_VAR_FLOOR;
            let s = 1.0 / var.max(LAYER_NORM_VAR_FLOOR).sqrt();
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
            inv_std.push(s);
            floored.push(is_floored);
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            floored,
        };
        self.push(shape, out, op, &[x, gamma, beta])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(shape, out, Op::Softmax { a }, &[a])
    }

    /// Gathers rows of `table` (`[n, d]`) for every id; output shape is `id_shape ++ [d]`.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        ids: &[usize],
        id_shape: &[usize],
    ) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(
                "embedding_lookup",
                format!("table must be rank 2, got {}", dims(&ts)),
            ));
        }
        if id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding_lookup",
                format!("{} ids do not fill shape {}", ids.len(), dims(id_shape)),
            ));
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= n) {
            return Err(Error::TokenOutOfRange { id, size: n });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        self.push(
            shape,
            out,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Replaces entries where `keep` is false with `value`. Those entries carry no gradient.
    pub fn mask_fill(&mut self, a: Var, keep: &[bool], value: f64) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(Error::shape(
                "mask_fill",
                format!(
                    "mask of {} entries for tensor {}",
                    keep.len(),
                    dims(self.shape(a))
                ),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { value })
            .collect();
        self.push(
            self.shape(a).to_vec(),
            data,
            Op::MaskFill {
                a,
                keep: keep.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {}", dims(self.shape(a)), dims(shape)),
            ));
        }
        let data = self.data(a).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape { a }, &[a])
    }

    /// Reorders dimensions: output dimension `i` is input dimension `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for {}", dims(&shape)),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let data = permute_data(self.data(a), &shape, axes);
        self.push(
            out_shape,
            data,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        )
    }

    /// Mean over the second dimension of `[b, l, d]`, counting only positions where `keep` is true.
    pub fn masked_mean_pool(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || keep.len() != shape[0] * shape[1] {
            return Err(Error::shape(
                "masked_mean_pool",
                format!("input {} with mask of {} entries", dims(&shape), keep.len()),
            ));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let ad = self.data(a);
        let mut out = vec![0.0; b * d];
        let mut counts = Vec::with_capacity(b);
        for i in 0..b {
            let count = keep[i * l..(i + 1) * l].iter().filter(|&&k| k).count();
            if count == 0 {
                return Err(Error::Empty(
                    "masked_mean_pool: example has no unmasked positions",
                ));
            }
            let acc = &mut out[i * d..(i + 1) * d];
            for j in (0..l).filter(|&j| keep[i * l + j]) {
                let row = &ad[(i * l + j) * d..(i * l + j + 1) * d];
                acc.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            acc.iter_mut().for_each(|o| *o /= count as f64);
            counts.push(count);
        }
        self.push(
            vec![b, d],
            out,
            Op::MaskedMeanPool {
                a,
                keep: keep.to_vec(),
                counts,
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().sum();
        self.push(vec![1], vec![total], Op::Sum { a }, &[a])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    /// `logits` is `[rows, classes]`; rows with a `None` target are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {} with {} targets", dims(&shape), targets.len()),
            ));
        }
        let classes = shape[1];
        for (row, t) in targets.iter().enumerate() {
            if let Some(label) = *t {
                if label >= classes {
                    return Err(Error::LabelOutOfRange {
                        label,
                        classes,
                        row,
                    });
                }
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy: no labelled rows"));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            if let Some(label) = *t {
                total += lse - row[label];
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push(vec![1], vec![total / count as f64], op, &[logits])
    }

    /// Propagates d(loss)/d(node) back through the tape and adds the result into
    /// the gradient slot of every differentiable leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarBackward(loss_shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::EmptyGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                if node.value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
            Op::Constant => {}
            &Op::Add { a, b } => {
                if self.requires_grad(b) {
                    let n = self.value(b).len();
                    let mut gb = vec![0.0; n];
                    g.iter().enumerate().for_each(|(j, v)| gb[j % n] += v);
                    accumulate(grads, b, gb);
                }
                if self.requires_grad(a) {
                    accumulate(grads, a, g);
                }
            }
            &Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let ga = g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let gb = g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, gb);
                }
            }
            &Op::Scale { a, factor } => {
                accumulate(grads, a, g.iter().map(|x| x * factor).collect());
            }
            &Op::Relu { a } => {
                let ga = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(grads, a, ga);
            }
            &Op::MatMul { a, b, batched } => self.matmul_backward(a, b, batched, &g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.value(gamma).len();
                let gd = self.data(gamma);
                if self.requires_grad(gamma) || self.requires_grad(beta) {
                    let mut ggamma = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for (r, grow) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            ggamma[j] += grow[j] * xhat[r * d + j];
                            gbeta[j] += grow[j];
                        }
                    }
                    if self.requires_grad(gamma) {
                        accumulate(grads, gamma, ggamma);
                    }
                    if self.requires_grad(beta) {
                        accumulate(grads, beta, gbeta);
                    }
                }
                if self.requires_grad(x) {
                    let mut gx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; d];
                    for (r, grow) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = if floored[r] {
                            0.0
                        } else {
                            dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64
                        };
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                    accumulate(grads, x, gx);
                }
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut ga = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        ga[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a, ga);
            }
            Op::EmbeddingLookup { table, ids } => {
                let table = *table;
                let d = self.shape(table)[1];
                let mut gt = vec![0.0; self.value(table).len()];
                for (p, &id) in ids.iter().enumerate() {
                    let src = &g[p * d..(p + 1) * d];
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(t, s)| *t += s);
                }
                accumulate(grads, table, gt);
            }
            Op::MaskFill { a, keep } => {
                let ga = g
                    .iter()
                    .zip(keep)
                    .map(|(&x, &k)| if k { x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ga);
            }
            &Op::Reshape { a } => accumulate(grads, a, g),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let ga = permute_data(&g, node.value.shape(), &inverse);
                accumulate(grads, *a, ga);
            }
            Op::MaskedMeanPool { a, keep, counts } => {
                let a = *a;
                let shape = self.shape(a);
                let (b, l, d) = (shape[0], shape[1], shape[2]);
                let mut ga = vec![0.0; b * l * d];
                for i in 0..b {
                    let scale = 1.0 / counts[i] as f64;
                    for j in (0..l).filter(|&j| keep[i * l + j]) {
                        let dst = &mut ga[(i * l + j) * d..(i * l + j + 1) * d];
                        dst.iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(o, v)| *o = v * scale);
                    }
                }
                accumulate(grads, a, ga);
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                accumulate(grads, a, vec![g[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(label) = *t {
                        for c in 0..classes {
                            gl[r * classes + c] = probs[r * classes + c] * scale;
                        }
                        gl[r * classes + label] -= scale;
                    }
                }
                accumulate(grads, *logits, gl);
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        batched: bool,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let rows = self.value(a).len() / k;
        let (ad, bd) = (self.data(a), self.data(b));
        if self.requires_grad(a) {
            let mut ga = vec![0.0; ad.len()];
            parallel::for_each_row(&mut ga, k, rows * k * n, |r, row| {
                let grow = &g[r * n..(r + 1) * n];
                let boff = if batched { (r / m) * k * n } else { 0 };
                for (kk, out) in row.iter_mut().enumerate() {
                    let brow = &bd[boff + kk * n..boff + (kk + 1) * n];
                    *out = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            });
            accumulate(grads, a, ga);
        }
        if self.requires_grad(b) {
            let mut gb = vec![0.0; bd.len()];
            // One output row per (batch, kk); each sums over its own rows of `a` in order.
            parallel::for_each_row(&mut gb, n, rows * k * n, |row_idx, row| {
                let (batch, kk) = (row_idx / k, row_idx % k);
                let r_range = if batched {
                    batch * m..(batch + 1) * m
                } else {
                    0..rows
                };
                for r in r_range {
                    let av = ad[r * k + kk];
                    row.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(o, x)| *o += av * x);
                }
            });
            accumulate(grads, b, gb);
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = (0..rank).map(|i| idx[i] * in_strides[axes[i]]).sum();
        out.push(data[src]);
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_identity_block() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let id = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let c = g.matmul(a, id).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.data(c), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"),
            "{err}"
        );
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(a).unwrap();
        assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[5.0, 5.0, 5.0]));
        let gamma = g.param(t(&[3], &[1.0, 1.0, 1.0]));
        let beta = g.param(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 0.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let l = g.param(t(&[1, 2], &[10.0, -10.0]));
        let loss = g.cross_entropy(l, &[Some(0)]).unwrap();
        assert!(g.data(loss)[0] < 1e-4);

        let l = g.param(t(&[1, 2], &[0.0, 0.0]));
        let loss = g.cross_entropy(l, &[Some(0)]).unwrap();
        assert!((g.data(loss)[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = g.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.cross_entropy(l, &[Some(0), Some(3)]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3,
                row: 1
            })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.3 - 1.0));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_half_square_norm_is_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[5], |i| i as f64 - 2.5));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.data(x));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 2], |i| 0.1 * i as f64 + 0.2));
        let w = g.param(Tensor::from_fn(&[2, 2], |i| 0.3 - 0.2 * i as f64));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y).unwrap();
        let loss = g.cross_entropy(y, &[Some(1), Some(0)]).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(w).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(w).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarBackward(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::EmptyGraph)));
    }

    #[test]
    #[allow(clippy::identity_op, clippy::erasing_op)] // strides spelled out
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element (i, j, k) of x lands at (k, i, j)
        assert_eq!(g.data(p)[1 * 6 + 0 * 3 + 2], g.data(x)[0 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn nodes_without_grad_are_constant() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.scale(a, 3.0).unwrap();
        assert!(!g.value(b).requires_grad());
    }
}
