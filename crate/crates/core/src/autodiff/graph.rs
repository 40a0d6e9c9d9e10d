//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Graph::backward`] walks the tape
//! once in reverse; a second call is a state error.

use crate::error::{Error, Result};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{ensure_finite, numel};
use super::{DiffTensor, Real};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: F },
    Relu { a: Var },
    Tanh { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    CrossEntropy { logits: Var, probs: Vec<F>, targets: Vec<Option<usize>>, count: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Permute { a: Var, map: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    BroadcastLead { a: Var, copies: usize },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    requires_grad: bool,
    op: Op<F>,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

/// For each output position of a permuted tensor, the flat index it reads
/// from in the input.
fn permutation_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    if total == 0 {
        return map;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Only valid before
    /// backward; handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>, name: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        debug_assert_eq!(numel(&shape), value.len());
        ensure_finite(&value, name)?;
        self.nodes.push(Node { shape, value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> DiffTensor<F> {
        let n = self.node(v);
        DiffTensor::new(n.shape.clone(), n.value.clone()).expect("recorded values are finite")
    }

    /// Records a tensor as a leaf. Leaves created from a tensor with
    /// `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, t: &DiffTensor<F>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<F>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return shape_err(format!("constant of shape {shape:?} given {} values", value.len()));
        }
        self.push(shape, value, false, Op::Leaf, "constant")
    }

    pub fn input(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return shape_err(format!("input of shape {shape:?} given {} values", value.len()));
        }
        self.push(shape, value, requires_grad, Op::Leaf, "input")
    }

    /// Matrix product. `b` is either a 2-D `[k×n]` matrix applied to the
    /// trailing dimension of `a`, or a batch `[..., k, n]` with the same
    /// leading dimensions as `a = [..., m, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, shared_b, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return shape_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
            }
            let m = numel(&sa[..sa.len() - 1]);
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            (1, m, sb[1], true, out)
        } else {
            let r = sa.len();
            if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
                return shape_err(format!("batched matmul shapes incompatible: {sa:?} x {sb:?}"));
            }
            let batch = numel(&sa[..r - 2]);
            let mut out = sa[..r - 1].to_vec();
            out.push(sb[r - 1]);
            (batch, sa[r - 2], sb[r - 1], false, out)
        };
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            if shared_b {
                gemm_nn(batch * m, k, n, av, bv, &mut out);
            } else {
                for i in 0..batch {
                    gemm_nn(m, k, n, &av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n], &mut out[i * m * n..(i + 1) * m * n]);
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out_shape, out, rg, Op::MatMul { a, b, batch, m, k, n, shared_b }, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }, "mul")
    }

    /// Adds a vector along the trailing dimension.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let d = *sa.last().unwrap_or(&0);
        if sa.is_empty() || self.shape(bias) != [d] {
            return shape_err(format!("bias {:?} does not match trailing dim of {sa:?}", self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        if d > 0 {
            for row in out.chunks_exact_mut(d) {
                for (x, &b) in row.iter_mut().zip(bv) {
                    *x += b;
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        self.push(self.shape(a).to_vec(), out, rg, Op::AddBias { a, bias }, "add_bias")
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        self.push(self.shape(a).to_vec(), out, self.requires_grad(a), Op::Scale { a, factor }, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
        self.push(self.shape(a).to_vec(), out, self.requires_grad(a), Op::Relu { a }, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push(self.shape(a).to_vec(), out, self.requires_grad(a), Op::Tanh { a }, "tanh")
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a);
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        self.push(shape, out, self.requires_grad(a), Op::Softmax { a, outer, len, inner }, "softmax")
    }

    /// Normalizes the trailing dimension to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm epsilon must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if shape.is_empty() || d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(format!(
                "layer_norm gain {:?} / bias {:?} must match trailing dim of {shape:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let eps = F::of(eps);
        let inv_d = F::one() / F::of(d as f64);
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm")
    }

    /// Mean negative log-likelihood over rows whose target is not `pad_id`.
    /// `logits` has the vocabulary as its trailing dimension.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().unwrap_or(&0);
        if shape.is_empty() || vocab == 0 {
            return shape_err(format!("cross_entropy logits shape {shape:?}"));
        }
        let rows = numel(&shape) / vocab;
        if targets.len() != rows {
            return shape_err(format!("cross_entropy: {rows} rows but {} targets", targets.len()));
        }
        let mut mapped = Vec::with_capacity(rows);
        for (i, &t) in targets.iter().enumerate() {
            if t == pad_id {
                mapped.push(None);
            } else if t >= vocab {
                return Err(Error::Input(format!("target id {t} at row {i} outside vocabulary of {vocab}")));
            } else {
                mapped.push(Some(t));
            }
        }
        let count = mapped.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Input("cross_entropy over an all-padding batch".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = F::zero();
        for (r, t) in mapped.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= sum;
            }
            total += sum.ln() + max - row[t];
        }
        let loss = total / F::of(count as f64);
        let rg = self.requires_grad(logits);
        self.push(vec![], vec![loss], rg, Op::CrossEntropy { logits, probs, targets: mapped, count }, "cross_entropy")
    }

    /// Gathers rows of a `[vocab×d]` table. Output shape is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return shape_err(format!("embedding table must be 2-D, got {ts:?}"));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("token id {bad} outside embedding table of {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(vec![ids.len(), d], out, rg, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for {shape:?}"));
        }
        let map = permutation_map(&shape, perm);
        let av = self.value(a);
        let out = map.iter().map(|&i| av[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(out_shape, out, self.requires_grad(a), Op::Permute { a, map }, "permute")
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2".into());
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        self.push(shape, out, self.requires_grad(a), Op::Reshape { a }, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors".into());
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return shape_err(format!("concat shapes disagree off axis {axis}: {base:?} vs {s:?}"));
            }
            total_axis += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(shape, out, rg, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Repeats `a` along a new leading dimension of size `copies`.
    pub fn broadcast_lead(&mut self, a: Var, copies: usize) -> Result<Var> {
        let mut shape = vec![copies];
        shape.extend_from_slice(self.shape(a));
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.len() * copies);
        for _ in 0..copies {
            out.extend_from_slice(av);
        }
        self.push(shape, out, self.requires_grad(a), Op::BroadcastLead { a, copies }, "broadcast")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], self.requires_grad(a), Op::Sum { a }, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return shape_err("mean of an empty tensor".into());
        }
        let s = self.value(a).iter().copied().sum::<F>() / F::of(n as f64);
        self.push(vec![], vec![s], self.requires_grad(a), Op::Mean { a }, "mean")
    }

    /// Propagates gradients from the scalar `loss` back to every leaf that
    /// requires them. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward called twice on the same tape".into()));
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    ensure_finite(g, "backward")?;
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&mut self, i: usize, g: &[F]) {
        // The op is moved out temporarily so its saved buffers can be read
        // while input gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                if self.requires_grad(a) {
                    let bv = self.value(b);
                    let mut da = vec![F::zero(); batch * m * k];
                    if shared_b {
                        gemm_nt(batch * m, n, k, g, bv, &mut da);
                    } else {
                        for s in 0..batch {
                            let bs = &bv[s * k * n..(s + 1) * k * n];
                            gemm_nt(m, n, k, &g[s * m * n..(s + 1) * m * n], bs, &mut da[s * m * k..(s + 1) * m * k]);
                        }
                    }
                    add_into(self.acc(a).unwrap(), &da);
                }
                if self.requires_grad(b) {
                    let av = self.value(a);
                    let mut db = vec![F::zero(); if shared_b { k * n } else { batch * k * n }];
                    if shared_b {
                        gemm_tn(batch * m, k, n, av, g, &mut db);
                    } else {
                        for s in 0..batch {
                            let dbs = &mut db[s * k * n..(s + 1) * k * n];
                            gemm_tn(m, k, n, &av[s * m * k..(s + 1) * m * k], &g[s * m * n..(s + 1) * m * n], dbs);
                        }
                    }
                    add_into(self.acc(b).unwrap(), &db);
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = self.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(b) {
                    add_into(gb, g);
                }
            }
            &Op::AddBias { a, bias } => {
                if let Some(ga) = self.acc(a) {
                    add_into(ga, g);
                }
                let d = self.shape(bias)[0];
                if let Some(gb) = self.acc(bias) {
                    if d > 0 {
                        for row in g.chunks_exact(d) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).to_vec();
                    let ga = self.acc(a).unwrap();
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gy * y;
                    }
                }
                if self.requires_grad(b) {
                    let av = self.value(a).to_vec();
                    let gb = self.acc(b).unwrap();
                    for ((x, &gy), &y) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gy * y;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(ga) = self.acc(a) {
                    for (x, &gy) in ga.iter_mut().zip(g) {
                        *x += gy * factor;
                    }
                }
            }
            &Op::Relu { a } => {
                if self.requires_grad(a) {
                    let av = self.value(a).to_vec();
                    let ga = self.acc(a).unwrap();
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(&av) {
                        if v > F::zero() {
                            *x += gy;
                        }
                    }
                }
            }
            &Op::Tanh { a } => {
                if self.requires_grad(a) {
                    let y = self.nodes[i].value.clone();
                    let ga = self.acc(a).unwrap();
                    for ((x, &gy), &t) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gy * (F::one() - t * t);
                    }
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                if self.requires_grad(a) {
                    let y = self.nodes[i].value.clone();
                    let ga = self.acc(a).unwrap();
                    for o in 0..outer {
                        for c in 0..inner {
                            let base = o * len * inner + c;
                            let mut dot = F::zero();
                            for j in 0..len {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..len {
                                let at = base + j * inner;
                                ga[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.shape(gain)[0];
                let rows = rstd.len();
                if self.requires_grad(gain) {
                    let gg = self.acc(gain).unwrap();
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(bias) {
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
                if self.requires_grad(x) {
                    let gv = self.value(gain).to_vec();
                    let inv_d = F::one() / F::of(d as f64);
                    let gx = self.acc(x).unwrap();
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rows {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gv[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[r * d + j];
                        }
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                let logits = *logits;
                let scale = g[0] / F::of(*count as f64);
                let vocab = *self.shape(logits).last().unwrap();
                if let Some(gl) = self.acc(logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            gl[r * vocab + j] += scale * probs[r * vocab + j];
                        }
                        gl[r * vocab + t] -= scale;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let d = self.shape(table)[1];
                if let Some(gt) = self.acc(table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Permute { a, map } => {
                if let Some(ga) = self.acc(*a) {
                    for (&src, &gy) in map.iter().zip(g) {
                        ga[src] += gy;
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.acc(a) {
                    add_into(ga, g);
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let base = self.shape(parts[0]).to_vec();
                let outer = numel(&base[..axis]);
                let inner = numel(&base[axis + 1..]);
                let blocks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
                let row: usize = blocks.iter().sum();
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let block = blocks[pi];
                    if let Some(gp) = self.acc(p) {
                        for o in 0..outer {
                            add_into(&mut gp[o * block..(o + 1) * block], &g[o * row + offset..o * row + offset + block]);
                        }
                    }
                    offset += block;
                }
            }
            &Op::BroadcastLead { a, copies } => {
                if let Some(ga) = self.acc(a) {
                    let n = ga.len();
                    for c in 0..copies {
                        add_into(ga, &g[c * n..(c + 1) * n]);
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.acc(a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = self.acc(a) {
                    let s = g[0] / F::of(ga.len() as f64);
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(g: &mut Graph<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.input(shape, data, true).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = input(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = input(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_contraction_gives_zeros() {
        let mut g = Graph::<f64>::new();
        let a = input(&mut g, vec![1, 0], vec![]);
        let b = input(&mut g, vec![0, 3], vec![]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 3]);
        assert_eq!(g.value(c), &[0.0; 3]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = input(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = input(&mut g, vec![2, 3], vec![0.0; 6]);
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let a = input(&mut g, vec![2], vec![0.0, 0.0]);
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
        let b = input(&mut g, vec![2], vec![1000.0, 0.0]);
        let s = g.softmax(b, 0).unwrap();
        assert!((g.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_on_middle_axis_normalizes_that_axis() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let a = input(&mut g, vec![2, 3, 4], data);
        let s = g.softmax(a, 1).unwrap();
        let v = g.value(s);
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gain() {
        let mut g = Graph::<f64>::new();
        let x = input(&mut g, vec![1, 4], vec![3.0; 4]);
        let one = input(&mut g, vec![4], vec![1.0; 4]);
        let zero = input(&mut g, vec![4], vec![0.0; 4]);
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let x = input(&mut g, vec![2, 4], vec![1.0, -2.0, 0.5, 7.0, 3.0, 3.5, -1.0, 0.0]);
        let bias = input(&mut g, vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let y = g.layer_norm(x, zero, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn layer_norm_rejects_non_positive_eps() {
        let mut g = Graph::<f64>::new();
        let x = input(&mut g, vec![1, 2], vec![1.0, 2.0]);
        let one = input(&mut g, vec![2], vec![1.0; 2]);
        assert!(matches!(g.layer_norm(x, one, one, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let mut g = Graph::<f64>::new();
        let uniform = input(&mut g, vec![2, 5], vec![0.0; 10]);
        let l = g.cross_entropy(uniform, &[1, 3], 0).unwrap();
        assert!((g.value(l)[0] - 5f64.ln()).abs() < 1e-12);

        let forced = input(&mut g, vec![1, 3], vec![-1e4, 1e4, -1e4]);
        let l = g.cross_entropy(forced, &[1], 0).unwrap();
        assert!(g.value(l)[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_padding_and_rejects_empty() {
        let mut g = Graph::<f64>::new();
        let logits = input(&mut g, vec![2, 3], vec![0.3, -0.2, 0.9, 5.0, -5.0, 2.0]);
        let l = g.cross_entropy(logits, &[2, 0], 0).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!(grad[3..].iter().all(|&x| x == 0.0));
        let mut g = Graph::<f64>::new();
        let logits = input(&mut g, vec![2, 3], vec![0.0; 6]);
        assert!(matches!(g.cross_entropy(logits, &[0, 0], 0), Err(Error::Input(_))));
        assert!(matches!(g.cross_entropy(logits, &[7, 1], 0), Err(Error::Input(_))));
    }

    #[test]
    fn sum_backward_and_double_backward() {
        let mut g = Graph::<f64>::new();
        let x = input(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        assert!(matches!(g.sum(x), Err(Error::State(_))));
    }

    #[test]
    fn non_finite_results_raise() {
        let mut g = Graph::<f32>::new();
        let x = g.input(vec![1], vec![f32::MAX], true).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = input(&mut g, vec![2, 3, 4], data.clone());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] of the permuted tensor is x[i, j, k]
        assert_eq!(g.value(p)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), &data[..]);
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_broadcast_backward() {
        let mut g = Graph::<f64>::new();
        let a = input(&mut g, vec![2, 1], vec![1.0, 2.0]);
        let b = input(&mut g, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bc = g.broadcast_lead(c, 2).unwrap();
        let wb = g.broadcast_lead(w, 2).unwrap();
        let m = g.mul(bc, wb).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 8.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 6.0, 10.0, 12.0]);
    }
}
