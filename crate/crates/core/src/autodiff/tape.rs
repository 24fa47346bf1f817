use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::SparseMatrix;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Degree normalizations of a dense, differentiable adjacency block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenseNorm {
    /// `D̂^-1/2 (A + I) D̂^-1/2`
    SelfLoopSymmetric,
    /// `D^-1/2 A D^-1/2`, zero rows/columns where the degree is zero.
    Symmetric,
    /// `D^-1 A` (weighted neighbor mean), zero rows where the degree is zero.
    RowMean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    RowSoftmax(Var),
    IndexSelectRows(Var, Vec<usize>),
    GatherRowsPadded(Var, Vec<Option<usize>>),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    L2Normalize(Var, f64),
    SegmentMean {
        x: Var,
        node_to_graph: Vec<usize>,
        counts: Vec<usize>,
    },
    Spmm(Arc<SparseMatrix>, Var),
    DenseNormalize(Var, DenseNorm),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the computation and backward is a single reverse
/// sweep. A tape is rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` when `var` does not
    /// influence the loss through tracked operations.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    ///
    /// Parameters that are reachable but received no signal get an explicit
    /// zero gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            let p = store.get_mut(id);
            match &self.grads[node] {
                Some(g) => p.accumulate_grad(g),
                None => p.accumulate_grad(&vec![0.0; p.numel()]),
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.require_matrix(op)
    }

    /// Records a leaf; gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).clone();
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::MatMul(a, b), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vals = va
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), vals)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vals = va
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), vals)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vals = va.values().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), vals).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.map(a, |x| x * factor);
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, factor), tracked)
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let tracked = self.tracked(a);
        self.push(t, Op::Relu(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let tracked = self.tracked(a);
        self.push(t, Op::Tanh(a), tracked)
    }

    /// Adds a `[1, n]` (or `[n]`) row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "add_bias")?;
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).values();
        let mut vals = self.value(x).values().to_vec();
        for r in 0..m {
            vals[r * n..(r + 1) * n].iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(vec![m, n], vals)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(t, Op::AddBias(x, bias), tracked))
    }

    /// Multiplies row `i` of `x` by `s[i]`, where `s` is `[m, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "scale_rows")?;
        if self.value(s).numel() != m {
            return Err(Error::dim("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).values();
        let mut vals = self.value(x).values().to_vec();
        for r in 0..m {
            vals[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= sv[r]);
        }
        let t = Tensor::new(vec![m, n], vals)?;
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(t, Op::ScaleRows(x, s), tracked))
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "row_softmax")?;
        let mut vals = self.value(x).values().to_vec();
        for r in 0..m {
            softmax_in_place(&mut vals[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![m, n], vals)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::RowSoftmax(x), tracked))
    }

    /// Gathers rows in `idx` order. Backward scatters gradient rows back.
    pub fn index_select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(x, "index_select_rows")?;
        let src = self.value(x).values();
        let mut vals = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index { index: i, extent: m });
            }
            vals.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], vals)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::IndexSelectRows(x, idx.to_vec()), tracked))
    }

    /// Like [`Tape::index_select_rows`], with `None` producing a zero row.
    pub fn gather_rows_padded(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather_rows_padded")?;
        let src = self.value(x).values();
        let mut vals = vec![0.0; idx.len() * n];
        for (o, slot) in idx.iter().enumerate() {
            if let Some(i) = *slot {
                if i >= m {
                    return Err(Error::Index { index: i, extent: m });
                }
                vals[o * n..(o + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let t = Tensor::new(vec![idx.len(), n], vals)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::GatherRowsPadded(x, idx.to_vec()), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "transpose")?;
        let src = self.value(x).values();
        let mut vals = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                vals[c * m + r] = src[r * n + c];
            }
        }
        let t = Tensor::new(vec![n, m], vals)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Transpose(x), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_cols of nothing".into()))?;
        let (m, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut vals = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                vals.extend_from_slice(&self.value(p).values()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], vals)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
        let (_, n) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.matrix(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
        }
        let mut vals = Vec::with_capacity(rows * n);
        for &p in parts {
            vals.extend_from_slice(self.value(p).values());
        }
        let t = Tensor::new(vec![rows, n], vals)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.value(x).values().to_vec())?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// `v / ‖v‖₂` over all entries. A zero vector is a numeric error.
    pub fn l2_normalize(&mut self, v: Var) -> Result<Var> {
        let norm = self.value(v).values().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(format!("cannot normalize a vector of norm {norm}")));
        }
        let t = self.map(v, |x| x / norm);
        let tracked = self.tracked(v);
        Ok(self.push(t, Op::L2Normalize(v, norm), tracked))
    }

    /// Per-segment row means. Row `i` of `x` belongs to segment
    /// `node_to_graph[i]`; empty segments yield a zero row.
    pub fn segment_mean(&mut self, x: Var, node_to_graph: &[usize], segments: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "segment_mean")?;
        if node_to_graph.len() != m {
            return Err(Error::dim("segment_mean", self.shape(x), &[node_to_graph.len()]));
        }
        let mut counts = vec![0usize; segments];
        for &g in node_to_graph {
            if g >= segments {
                return Err(Error::Index {
                    index: g,
                    extent: segments,
                });
            }
            counts[g] += 1;
        }
        let src = self.value(x).values();
        let mut vals = vec![0.0; segments * n];
        for (i, &g) in node_to_graph.iter().enumerate() {
            let out = &mut vals[g * n..(g + 1) * n];
            out.iter_mut().zip(&src[i * n..(i + 1) * n]).for_each(|(o, s)| *o += s);
        }
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                vals[g * n..(g + 1) * n].iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        let t = Tensor::new(vec![segments, n], vals)?;
        let tracked = self.tracked(x);
        Ok(self.push(
            t,
            Op::SegmentMean {
                x,
                node_to_graph: node_to_graph.to_vec(),
                counts,
            },
            tracked,
        ))
    }

    /// Sparse (constant) times dense (tracked) product.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let out = s.matmul_dense(self.value(x))?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Spmm(Arc::clone(s), x), tracked))
    }

    /// Degree normalization of a dense square block, differentiable in the block.
    pub fn dense_normalize(&mut self, a: Var, norm: DenseNorm) -> Result<Var> {
        let (n, n2) = self.matrix(a, "dense_normalize")?;
        if n != n2 {
            return Err(Error::dim("dense_normalize", self.shape(a), &[n, n]));
        }
        let src = self.value(a).values();
        let (work, scale) = normalize_factors(src, n, norm);
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                vals[i * n + j] = match norm {
                    DenseNorm::RowMean => work[i * n + j] * scale[i],
                    _ => scale[i] * work[i * n + j] * scale[j],
                };
            }
        }
        let t = Tensor::new(vec![n, n], vals)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::DenseNormalize(a, norm), tracked))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if b == 0 {
            return Err(Error::Argument("cross_entropy over an empty batch".into()));
        }
        let src = self.value(logits).values();
        let mut probs = src.to_vec();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Argument(format!("label {y} out of range for {c} classes")));
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let t = Tensor::scalar(loss / b as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward into `store`: convenience for `backward` + `accumulate_into`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, delta: Vec<f64>) {
        if !self.tracked(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                if self.tracked(*a) {
                    // dA = G · Bᵀ
                    let bv = self.value(*b).values();
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    self.send(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if self.tracked(*b) {
                    // dB = Aᵀ · G
                    let av = self.value(*a).values();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                db[p * n..(p + 1) * n]
                                    .iter_mut()
                                    .zip(gi)
                                    .for_each(|(d, x)| *d += aip * x);
                            }
                        }
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if self.tracked(*a) {
                    self.send(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.tracked(*b) {
                    self.send(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, f) => self.send(grads, *a, g.iter().map(|x| x * f).collect()),
            Op::Relu(a) => {
                let av = self.value(*a).values();
                let d = g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.send(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = node.value.values();
                let d = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.send(grads, *a, d);
            }
            Op::AddBias(x, bias) => {
                self.send(grads, *x, g.to_vec());
                if self.tracked(*bias) {
                    let (m, n) = dims(&node.value);
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        db.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(d, x)| *d += x);
                    }
                    self.send(grads, *bias, db);
                }
            }
            Op::ScaleRows(x, s) => {
                let (m, n) = dims(&node.value);
                let sv = self.value(*s).values();
                if self.tracked(*x) {
                    let mut dx = g.to_vec();
                    for r in 0..m {
                        dx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= sv[r]);
                    }
                    self.send(grads, *x, dx);
                }
                if self.tracked(*s) {
                    let xv = self.value(*x).values();
                    let ds = (0..m)
                        .map(|r| {
                            g[r * n..(r + 1) * n]
                                .iter()
                                .zip(&xv[r * n..(r + 1) * n])
                                .map(|(g, x)| g * x)
                                .sum()
                        })
                        .collect();
                    self.send(grads, *s, ds);
                }
            }
            Op::RowSoftmax(x) => {
                let (m, n) = dims(&node.value);
                let y = node.value.values();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::IndexSelectRows(x, idx) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, &i) in idx.iter().enumerate() {
                    dx[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[o * n..(o + 1) * n])
                        .for_each(|(d, v)| *d += v);
                }
                self.send(grads, *x, dx);
            }
            Op::GatherRowsPadded(x, idx) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, slot) in idx.iter().enumerate() {
                    if let Some(i) = *slot {
                        dx[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&g[o * n..(o + 1) * n])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Transpose(x) => {
                // node is n×m, source m×n
                let (n, m) = dims(&node.value);
                let mut dx = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        dx[c * n + r] = g[r * m + c];
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims(&node.value);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.tracked(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.send(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.send(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::L2Normalize(v, norm) => {
                // d(v/|v|) = (g - u (u·g)) / |v|
                let u = node.value.values();
                let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
                let d = g.iter().zip(u).map(|(g, u)| (g - u * dot) / norm).collect();
                self.send(grads, *v, d);
            }
            Op::SegmentMean {
                x,
                node_to_graph,
                counts,
            } => {
                let n = node.value.cols();
                let mut dx = vec![0.0; node_to_graph.len() * n];
                for (i, &s) in node_to_graph.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    for c in 0..n {
                        dx[i * n + c] = g[s * n + c] * inv;
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Spmm(s, x) => {
                let dx = s.transpose_matmul_raw(g, node.value.cols());
                self.send(grads, *x, dx);
            }
            Op::DenseNormalize(a, norm) => {
                let av = self.value(*a).values();
                let n = node.value.rows();
                self.send(grads, *a, dense_normalize_backward(av, g, n, *norm));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let b = labels.len() as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g[0] / b);
                self.send(grads, *logits, d);
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            row.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Returns the working matrix (with self-loops when requested) and the
/// per-row scale: `d^-1/2` for symmetric modes, `d^-1` for row mean.
fn normalize_factors(a: &[f64], n: usize, norm: DenseNorm) -> (Vec<f64>, Vec<f64>) {
    let mut work = a.to_vec();
    if norm == DenseNorm::SelfLoopSymmetric {
        for i in 0..n {
            work[i * n + i] += 1.0;
        }
    }
    let scale = (0..n)
        .map(|i| {
            let d: f64 = work[i * n..(i + 1) * n].iter().sum();
            if d > 0.0 {
                match norm {
                    DenseNorm::RowMean => 1.0 / d,
                    _ => 1.0 / d.sqrt(),
                }
            } else {
                0.0
            }
        })
        .collect();
    (work, scale)
}

fn dense_normalize_backward(a: &[f64], g: &[f64], n: usize, norm: DenseNorm) -> Vec<f64> {
    let (work, s) = normalize_factors(a, n, norm);
    let mut da = vec![0.0; n * n];
    match norm {
        DenseNorm::RowMean => {
            // out_ij = w_ij q_i, q_i = 1/d_i, d_i = Σ_j w_ij
            for i in 0..n {
                let dq: f64 = (0..n).map(|j| g[i * n + j] * work[i * n + j]).sum();
                let dd = -dq * s[i] * s[i];
                for j in 0..n {
                    da[i * n + j] = g[i * n + j] * s[i] + dd;
                }
            }
        }
        DenseNorm::Symmetric | DenseNorm::SelfLoopSymmetric => {
            // out_ij = r_i w_ij r_j, r_i = d_i^-1/2
            let mut dr = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let gw = g[i * n + j] * work[i * n + j];
                    dr[i] += gw * s[j];
                    dr[j] += gw * s[i];
                }
            }
            let dd: Vec<f64> = (0..n).map(|i| -0.5 * dr[i] * s[i].powi(3)).collect();
            for i in 0..n {
                for j in 0..n {
                    da[i * n + j] = g[i * n + j] * s[i] * s[j] + dd[i];
                }
            }
        }
    }
    da
}
