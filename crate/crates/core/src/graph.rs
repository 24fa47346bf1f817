//! Graphs, coordinate-form sparse matrices and adjacency normalizations.

use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Real sparse matrix stored as `(row, col, value)` triples sorted by
/// `(row, col)` with no duplicates, plus row offsets for row-wise sweeps.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    row_ptr: Vec<usize>,
}

impl SparseMatrix {
    /// Validates and sorts `triples`. Duplicate coordinates are rejected.
    pub fn from_triples(n_rows: usize, n_cols: usize, mut triples: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, v) in &triples {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Validation(format!("entry ({r}, {c}) outside {n_rows}x{n_cols}")));
            }
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite value at ({r}, {c})")));
            }
        }
        triples.sort_by_key(|a| (a.0, a.1));
        if let Some(w) = triples.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::Validation(format!(
                "duplicate entry at ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self::from_sorted(n_rows, n_cols, triples))
    }

    fn from_sorted(n_rows: usize, n_cols: usize, triples: Vec<(usize, usize, f64)>) -> Self {
        let mut row_ptr = vec![0; n_rows + 1];
        for &(r, _, _) in &triples {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let (mut rows, mut cols, mut vals) = (
            Vec::with_capacity(triples.len()),
            Vec::with_capacity(triples.len()),
            Vec::with_capacity(triples.len()),
        );
        for (r, c, v) in triples {
            rows.push(r);
            cols.push(c);
            vals.push(v);
        }
        Self {
            n_rows,
            n_cols,
            rows,
            cols,
            vals,
            row_ptr,
        }
    }

    /// Binary symmetric adjacency from undirected edges. Each edge is stored
    /// as two mirrored triples; repeated edges collapse and self-loops are
    /// dropped.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut triples = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!("edge ({u}, {v}) outside {n} nodes")));
            }
            if u != v {
                triples.push((u, v, 1.0));
                triples.push((v, u, 1.0));
            }
        }
        triples.sort_by_key(|a| (a.0, a.1));
        triples.dedup_by(|a, b| (a.0, a.1) == (b.0, b.1));
        Ok(Self::from_sorted(n, n, triples))
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self::from_sorted(n_rows, n_cols, Vec::new())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_sorted(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    /// Sparse copy of the nonzero entries of a dense matrix.
    pub fn from_dense(t: &Tensor) -> Result<Self> {
        let (m, n) = t.require_matrix("from_dense")?;
        let mut triples = Vec::new();
        for r in 0..m {
            for c in 0..n {
                let v = t.get(r, c);
                if v != 0.0 {
                    triples.push((r, c, v));
                }
            }
        }
        Self::from_triples(m, n, triples)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.vals.len()).map(move |i| (self.rows[i], self.cols[i], self.vals[i]))
    }

    /// Entries of one row, in column order.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |i| (self.cols[i], self.vals[i]))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]];
        match span.binary_search(&c) {
            Ok(i) => self.vals[self.row_ptr[r] + i],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row_entries(r).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.entries().all(|(r, c, v)| self.get(c, r) == v)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        let n = self.n_cols;
        for (r, c, v) in self.entries() {
            t.values_mut()[r * n + c] = v;
        }
        t
    }

    /// `self · x` with rows accumulated in ascending column order.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        let (xr, c) = x.require_matrix("spmm")?;
        if xr != self.n_cols {
            return Err(Error::dim("spmm", &[self.n_rows, self.n_cols], x.shape()));
        }
        let xv = x.values();
        let mut out = vec![0.0; self.n_rows * c];
        for r in 0..self.n_rows {
            let row = &mut out[r * c..(r + 1) * c];
            for (col, v) in self.row_entries(r) {
                row.iter_mut()
                    .zip(&xv[col * c..(col + 1) * c])
                    .for_each(|(o, x)| *o += v * x);
            }
        }
        Tensor::new(vec![self.n_rows, c], out)
    }

    /// `selfᵀ · g` where `g` is a row-major `n_rows × cols` buffer.
    pub(crate) fn transpose_matmul_raw(&self, g: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols * cols];
        for (r, c, v) in self.entries() {
            out[c * cols..(c + 1) * cols]
                .iter_mut()
                .zip(&g[r * cols..(r + 1) * cols])
                .for_each(|(o, g)| *o += v * g);
        }
        out
    }

    /// Block-diagonal assembly.
    pub fn block_diag(blocks: &[&SparseMatrix]) -> Self {
        let mut triples = Vec::with_capacity(blocks.iter().map(|b| b.nnz()).sum());
        let (mut ro, mut co) = (0, 0);
        for b in blocks {
            triples.extend(b.entries().map(|(r, c, v)| (r + ro, c + co, v)));
            ro += b.n_rows;
            co += b.n_cols;
        }
        Self::from_sorted(ro, co, triples)
    }

    /// `self[idx, idx]` reindexed to `0..idx.len()`. `idx` must be strictly
    /// increasing.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Result<Self> {
        if self.n_rows != self.n_cols {
            return Err(Error::dim("principal_submatrix", &[self.n_rows, self.n_cols], &[]));
        }
        let mut new_index = vec![usize::MAX; self.n_rows];
        for (k, &i) in idx.iter().enumerate() {
            if i >= self.n_rows {
                return Err(Error::Index {
                    index: i,
                    extent: self.n_rows,
                });
            }
            if k > 0 && idx[k - 1] >= i {
                return Err(Error::Argument("submatrix indices must be strictly increasing".into()));
            }
            new_index[i] = k;
        }
        let mut triples = Vec::new();
        for &i in idx {
            for (c, v) in self.row_entries(i) {
                if new_index[c] != usize::MAX {
                    triples.push((new_index[i], new_index[c], v));
                }
            }
        }
        Ok(Self::from_sorted(idx.len(), idx.len(), triples))
    }

    /// `P·A·Pᵀ` where node `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_rows || self.n_rows != self.n_cols {
            return Err(Error::dim("permuted", &[self.n_rows, self.n_cols], &[perm.len()]));
        }
        let triples = self.entries().map(|(r, c, v)| (perm[r], perm[c], v)).collect();
        Self::from_triples(self.n_rows, self.n_cols, triples)
    }

    fn require_symmetric_binary(&self, op: &str) -> Result<()> {
        if self.n_rows != self.n_cols {
            return Err(Error::Validation(format!(
                "{op}: adjacency must be square, got {}x{}",
                self.n_rows, self.n_cols
            )));
        }
        if let Some((r, c, _)) = self.entries().find(|&(_, _, v)| v != 1.0) {
            return Err(Error::Validation(format!(
                "{op}: adjacency must be binary, entry ({r}, {c}) is not 1"
            )));
        }
        if !self.is_symmetric() {
            return Err(Error::Validation(format!("{op}: adjacency is not symmetric")));
        }
        Ok(())
    }

    /// Symmetric normalization `D^-1/2 W D^-1/2` of `W = self (+ I)`;
    /// zero-degree rows have no entries to scale.
    fn symmetric_normalized(&self, self_loops: bool) -> Self {
        let n = self.n_rows;
        let mut degree = self.row_sums();
        let mut triples = Vec::with_capacity(self.nnz() + if self_loops { n } else { 0 });
        for r in 0..n {
            let mut diag_seen = false;
            for (c, v) in self.row_entries(r) {
                if self_loops && c == r {
                    diag_seen = true;
                    triples.push((r, c, v + 1.0));
                } else {
                    if self_loops && !diag_seen && c > r {
                        diag_seen = true;
                        triples.push((r, r, 1.0));
                    }
                    triples.push((r, c, v));
                }
            }
            if self_loops && !diag_seen {
                triples.push((r, r, 1.0));
            }
        }
        if self_loops {
            degree.iter_mut().for_each(|d| *d += 1.0);
        }
        for t in &mut triples {
            t.2 /= (degree[t.0] * degree[t.1]).sqrt();
        }
        Self::from_sorted(n, n, triples)
    }

    /// `D^-1 A`: each row averages its neighbors. Empty rows stay empty.
    pub fn row_mean_normalized(&self) -> Self {
        let degree = self.row_sums();
        let triples = self.entries().map(|(r, c, v)| (r, c, v / degree[r])).collect();
        Self::from_sorted(self.n_rows, self.n_cols, triples)
    }
}

/// `D̂^-1/2 (A + I) D̂^-1/2` with `D̂_ii = Σ_j (A + I)_ij`.
pub fn normalize_gcn(a: &SparseMatrix) -> Result<SparseMatrix> {
    a.require_symmetric_binary("normalize_gcn")?;
    Ok(a.symmetric_normalized(true))
}

/// `D^-1/2 A D^-1/2` with `D_ii = Σ_j A_ij`; isolated nodes keep all-zero
/// rows and columns.
pub fn normalize_tagcn(a: &SparseMatrix) -> Result<SparseMatrix> {
    a.require_symmetric_binary("normalize_tagcn")?;
    Ok(a.symmetric_normalized(false))
}

/// Sparse-dense product outside of any tape.
pub fn spmm(s: &SparseMatrix, x: &Tensor) -> Result<Tensor> {
    s.matmul_dense(x)
}

/// A labelled undirected graph with node features.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub id: usize,
    pub adjacency: SparseMatrix,
    pub features: Tensor,
    pub label: usize,
}

impl Graph {
    pub fn new(id: usize, adjacency: SparseMatrix, features: Tensor, label: usize) -> Result<Self> {
        let (rows, _) = features.require_matrix("graph features")?;
        if adjacency.n_rows() != rows || adjacency.n_cols() != rows {
            return Err(Error::Validation(format!(
                "graph {id}: adjacency {}x{} does not match {rows} feature rows",
                adjacency.n_rows(),
                adjacency.n_cols()
            )));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Validation(format!("graph {id}: adjacency is not symmetric")));
        }
        Ok(Self {
            id,
            adjacency,
            features,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.n_rows()
    }

    /// Undirected edge count (each mirrored pair counted once).
    pub fn num_undirected_edges(&self) -> usize {
        let loops = self.adjacency.entries().filter(|&(r, c, _)| r == c).count();
        (self.adjacency.nnz() - loops) / 2 + loops
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }
}

/// Several graphs packed into one block-diagonal graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub adjacency: SparseMatrix,
    pub features: Tensor,
    pub node_to_graph: Vec<usize>,
    pub labels: Vec<usize>,
    pub offsets: Vec<usize>,
    pub ids: Vec<usize>,
}

impl GraphBatch {
    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_to_graph.len()
    }

    /// Node range of graph `b` inside the batch.
    pub fn node_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Recovers graph `b` as a standalone graph.
    pub fn slice(&self, b: usize) -> Result<Graph> {
        let range = self.node_range(b);
        let idx: Vec<usize> = range.clone().collect();
        let adjacency = self.adjacency.principal_submatrix(&idx)?;
        let c = self.features.cols();
        let values = self.features.values()[range.start * c..range.end * c].to_vec();
        let features = Tensor::new(vec![range.len(), c], values)?;
        Graph::new(self.ids[b], adjacency, features, self.labels[b])
    }
}

/// Packs graphs block-diagonally; node indices of graph `b` are offset by
/// the node count of graphs `0..b`.
pub fn batch_graphs<G: std::borrow::Borrow<Graph>>(graphs: &[G]) -> Result<GraphBatch> {
    let width = graphs
        .first()
        .map(|g| g.borrow().feature_width())
        .ok_or_else(|| Error::Argument("cannot batch zero graphs".into()))?;
    let mut offsets = vec![0];
    let mut node_to_graph = Vec::new();
    let mut features = Vec::new();
    for (b, g) in graphs.iter().enumerate() {
        let g = g.borrow();
        if g.feature_width() != width {
            return Err(Error::Validation(format!(
                "graph {} has feature width {}, expected {width}",
                g.id,
                g.feature_width()
            )));
        }
        node_to_graph.extend(std::iter::repeat_n(b, g.num_nodes()));
        features.extend_from_slice(g.features.values());
        offsets.push(offsets[b] + g.num_nodes());
    }
    let blocks: Vec<&SparseMatrix> = graphs.iter().map(|g| &g.borrow().adjacency).collect();
    let n = node_to_graph.len();
    Ok(GraphBatch {
        adjacency: SparseMatrix::block_diag(&blocks),
        features: Tensor::new(vec![n, width], features)?,
        node_to_graph,
        labels: graphs.iter().map(|g| g.borrow().label).collect(),
        offsets,
        ids: graphs.iter().map(|g| g.borrow().id).collect(),
    })
}

/// The sparse operators a convolution may need, computed once per adjacency.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    /// The binary adjacency itself.
    pub raw: Arc<SparseMatrix>,
    /// Self-loop symmetric normalization (GCN, SagPool scores).
    pub gcn: Arc<SparseMatrix>,
    /// Symmetric normalization without self-loops (TAGCN).
    pub tagcn: Arc<SparseMatrix>,
    /// Neighbor-mean operator (GraphSAGE).
    pub mean: Arc<SparseMatrix>,
}

impl GraphOperators {
    pub fn new(adjacency: SparseMatrix) -> Result<Self> {
        let gcn = normalize_gcn(&adjacency)?;
        let tagcn = normalize_tagcn(&adjacency)?;
        let mean = adjacency.row_mean_normalized();
        Ok(Self {
            raw: Arc::new(adjacency),
            gcn: Arc::new(gcn),
            tagcn: Arc::new(tagcn),
            mean: Arc::new(mean),
        })
    }

    /// Block-diagonal combination of per-graph operators.
    pub fn block_diag(parts: &[&GraphOperators]) -> Self {
        let pick = |f: fn(&GraphOperators) -> &SparseMatrix| {
            let blocks: Vec<&SparseMatrix> = parts.iter().map(|p| f(p)).collect();
            Arc::new(SparseMatrix::block_diag(&blocks))
        };
        Self {
            raw: pick(|p| &p.raw),
            gcn: pick(|p| &p.gcn),
            tagcn: pick(|p| &p.tagcn),
            mean: pick(|p| &p.mean),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.raw.n_rows()
    }
}
