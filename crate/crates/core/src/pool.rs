//! Graph pooling operators.
//!
//! Every operator maps node features and an adjacency to a smaller pair
//! `(x', A')` over a batch of graphs laid out contiguously along the node
//! axis (`node_to_graph` is nondecreasing). SortPool is the exception: it
//! produces a fixed-size `k × C` block per graph for a 1-D convolution
//! readout.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{topk_indices, ParamId, ParamStore, Tape, Tensor, Var};
use crate::conv::{Activation, Adjacency, DenseBlocks, GcnLayer, SageLayer};
use crate::error::{Error, Result};
use crate::graph::{GraphOperators, SparseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolKind {
    None,
    SortPool,
    DiffPool,
    Topk,
    SagPool,
}

impl PoolKind {
    pub const ALL: [PoolKind; 5] = [
        PoolKind::None,
        PoolKind::SortPool,
        PoolKind::DiffPool,
        PoolKind::Topk,
        PoolKind::SagPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::None => "none",
            PoolKind::SortPool => "sortpool",
            PoolKind::DiffPool => "diffpool",
            PoolKind::Topk => "topk",
            PoolKind::SagPool => "sagpool",
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PoolKind::None),
            "sortpool" => Ok(PoolKind::SortPool),
            "diffpool" => Ok(PoolKind::DiffPool),
            "topk" => Ok(PoolKind::Topk),
            "sagpool" => Ok(PoolKind::SagPool),
            other => Err(Error::Argument(format!(
                "unknown pooling {other:?} (expected none, sortpool, diffpool, topk or sagpool)"
            ))),
        }
    }
}

/// How many nodes a selection-based pool keeps per graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoolSize {
    /// `ceil(ratio · n)`, at least one node.
    Ratio(f64),
    Count(usize),
}

impl PoolSize {
    pub fn for_nodes(self, n: usize) -> usize {
        match self {
            PoolSize::Ratio(r) => ((r * n as f64).ceil() as usize).clamp(1, n.max(1)),
            PoolSize::Count(k) => k,
        }
    }
}

/// Where pooled nodes came from.
#[derive(Clone, Debug)]
pub enum Provenance {
    /// Kept node indices into the input batch, ascending.
    Kept(Vec<usize>),
    /// One soft assignment matrix `S_b` (`n_b × n'_b`) per graph.
    Assignment(Vec<Var>),
}

#[derive(Clone, Debug)]
pub struct PoolResult {
    pub x: Var,
    pub adjacency: Adjacency,
    pub provenance: Provenance,
    pub node_to_graph: Vec<usize>,
}

/// Contiguous node range of every graph. Fails when `node_to_graph` is
/// not nondecreasing or refers past `num_graphs`.
pub fn segment_ranges(node_to_graph: &[usize], num_graphs: usize) -> Result<Vec<Range<usize>>> {
    let mut ranges = vec![0..0; num_graphs];
    let mut start = 0;
    for i in 0..=node_to_graph.len() {
        let boundary = i == node_to_graph.len() || (i > start && node_to_graph[i] != node_to_graph[start]);
        if boundary && i > start {
            let g = node_to_graph[start];
            if g >= num_graphs {
                return Err(Error::Index {
                    index: g,
                    extent: num_graphs,
                });
            }
            if i < node_to_graph.len() && node_to_graph[i] < g {
                return Err(Error::Argument("node_to_graph must be nondecreasing".into()));
            }
            ranges[g] = start..i;
            start = i;
        }
    }
    Ok(ranges)
}

/// Row `b` is the mean of the feature rows of graph `b`. Graphs with no
/// nodes produce a zero row and a warning.
pub fn global_mean_readout(tape: &mut Tape, x: Var, node_to_graph: &[usize], num_graphs: usize) -> Result<Var> {
    let mut counts = vec![0usize; num_graphs];
    for &g in node_to_graph {
        if g < num_graphs {
            counts[g] += 1;
        }
    }
    for (g, _) in counts.iter().enumerate().filter(|(_, &c)| c == 0) {
        log::warn!("graph {g} has no surviving nodes; readout row is zero");
    }
    tape.segment_mean(x, node_to_graph, num_graphs)
}

/// Orders rows of one graph for SortPool: descending lexicographic order of
/// the row read right-to-left (last channel first), then ascending node index.
fn sortpool_order(values: &Tensor, range: Range<usize>) -> Vec<usize> {
    let mut nodes: Vec<usize> = range.collect();
    nodes.sort_by(|&a, &b| {
        let (ra, rb) = (values.row(a), values.row(b));
        for c in (0..ra.len()).rev() {
            match rb[c].total_cmp(&ra[c]) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        a.cmp(&b)
    });
    nodes
}

/// SortPool over a batch.
///
/// `layers` are the outputs of every convolution, earliest first; the last
/// entry is the final layer. They are concatenated channel-wise into width
/// `C`, every graph's nodes are sorted (last channel of the final layer
/// first, ties broken by the preceding channels right to left, then by node
/// index), the first `k` kept and zero rows appended up to `k`. Returns
/// `(num_graphs · k) × C`, graph-major.
pub fn sort_pool(tape: &mut Tape, layers: &[Var], node_to_graph: &[usize], num_graphs: usize, k: usize) -> Result<Var> {
    if k < 1 {
        return Err(Error::Argument("sort_pool needs k >= 1".into()));
    }
    let cat = if layers.len() == 1 {
        layers[0]
    } else {
        tape.concat_cols(layers)?
    };
    let ranges = segment_ranges(node_to_graph, num_graphs)?;
    let mut picks = Vec::with_capacity(num_graphs * k);
    for range in ranges {
        let order = sortpool_order(tape.value(cat), range);
        picks.extend(order.iter().take(k).map(|&i| Some(i)));
        picks.extend(std::iter::repeat_n(None, k.saturating_sub(order.len())));
    }
    tape.gather_rows_padded(cat, &picks)
}

/// 1-D convolution readout over SortPool output: a width-`C`, stride-`C`
/// kernel bank applied to the flattened `k × C` block (equivalently, a
/// shared `C → kernels` map per sorted row), relu, then flattened to
/// `k · kernels` features per graph.
#[derive(Clone, Debug)]
pub struct SortPoolReadout {
    pub k: usize,
    pub kernel: ParamId,
    pub bias: ParamId,
    width: usize,
    kernels: usize,
}

impl SortPoolReadout {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, k: usize, width: usize, kernels: usize, rng: &mut R) -> Self {
        Self {
            k,
            kernel: store.add_glorot("sortpool.conv1d.weight", width, kernels, rng),
            bias: store.add_zeros("sortpool.conv1d.bias", &[1, kernels]),
            width,
            kernels,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.k * self.kernels
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layers: &[Var],
        node_to_graph: &[usize],
        num_graphs: usize,
    ) -> Result<Var> {
        let sorted = sort_pool(tape, layers, node_to_graph, num_graphs, self.k)?;
        if tape.value(sorted).cols() != self.width {
            return Err(Error::dim(
                "sortpool readout",
                tape.shape(sorted),
                &[self.k, self.width],
            ));
        }
        let w = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(sorted, w)?;
        let h = tape.add_bias(h, b)?;
        let h = tape.relu(h);
        tape.reshape(h, &[num_graphs, self.k * self.kernels])
    }
}

/// Shared tail of Top-k and SagPool: gate by `tanh(y)`, keep `k` rows per
/// graph in original order, and take the induced subgraph.
fn select_and_gate(
    tape: &mut Tape,
    adj: &Adjacency,
    x: Var,
    scores: Var,
    node_to_graph: &[usize],
    num_graphs: usize,
    size: PoolSize,
) -> Result<PoolResult> {
    let Adjacency::Sparse(ops) = adj else {
        return Err(Error::Argument("selection pooling needs a sparse adjacency".into()));
    };
    let ranges = segment_ranges(node_to_graph, num_graphs)?;
    let y = tape.value(scores).values().to_vec();
    let mut kept = Vec::new();
    let mut new_map = Vec::new();
    for (g, range) in ranges.into_iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let k = size.for_nodes(range.len());
        for i in topk_indices(&y[range.clone()], k)? {
            kept.push(range.start + i);
            new_map.push(g);
        }
    }
    let gate = tape.tanh(scores);
    let gated = tape.scale_rows(x, gate)?;
    let pooled = tape.index_select_rows(gated, &kept)?;
    let sub = ops.raw.principal_submatrix(&kept)?;
    Ok(PoolResult {
        x: pooled,
        adjacency: Adjacency::Sparse(GraphOperators::new(sub)?),
        provenance: Provenance::Kept(kept),
        node_to_graph: new_map,
    })
}

/// Top-k pooling with a trainable projection `p`:
/// `y = X p / ‖p‖`, keep the top-k nodes, `x' = (X ⊙ tanh(y))[idx]`.
#[derive(Clone, Debug)]
pub struct TopkLayer {
    pub projection: ParamId,
    pub size: PoolSize,
    in_dim: usize,
}

impl TopkLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        size: PoolSize,
        rng: &mut R,
    ) -> Self {
        Self {
            projection: store.add_glorot(format!("{name}.projection"), in_dim, 1, rng),
            size,
            in_dim,
        }
    }

    /// `X p / ‖p‖`, differentiable in both.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, c) = tape.value(x).require_matrix("topk_pool")?;
        if c != self.in_dim {
            return Err(Error::dim("topk_pool", tape.shape(x), &[self.in_dim, 1]));
        }
        let p = tape.param(store, self.projection);
        let unit = tape.l2_normalize(p)?;
        tape.matmul(x, unit)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        adj: &Adjacency,
        x: Var,
        node_to_graph: &[usize],
        num_graphs: usize,
    ) -> Result<PoolResult> {
        let y = self.scores(tape, store, x)?;
        select_and_gate(tape, adj, x, y, node_to_graph, num_graphs, self.size)
    }
}

/// Self-attention pooling: scores from a one-channel GCN.
#[derive(Clone, Debug)]
pub struct SagLayer {
    pub score_gnn: GcnLayer,
    pub size: PoolSize,
}

impl SagLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        size: PoolSize,
        rng: &mut R,
    ) -> Self {
        Self {
            score_gnn: GcnLayer::new(store, &format!("{name}.score"), in_dim, 1, Activation::Identity, rng),
            size,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        adj: &Adjacency,
        x: Var,
        node_to_graph: &[usize],
        num_graphs: usize,
    ) -> Result<PoolResult> {
        let y = self.score_gnn.forward(tape, store, adj, x)?;
        select_and_gate(tape, adj, x, y, node_to_graph, num_graphs, self.size)
    }
}

/// One graph's adjacency as seen by DiffPool.
#[derive(Clone, Debug)]
pub enum AdjacencyBlock {
    Sparse(Arc<SparseMatrix>),
    Dense(Var),
}

/// `(Sᵀ Z, Sᵀ A S)` for one graph.
pub fn assignment_coarsen(tape: &mut Tape, s: Var, z: Var, a: &AdjacencyBlock) -> Result<(Var, Var)> {
    let st = tape.transpose(s)?;
    let x = tape.matmul(st, z)?;
    let as_ = match a {
        AdjacencyBlock::Sparse(m) => tape.spmm(m, s)?,
        AdjacencyBlock::Dense(v) => tape.matmul(*v, s)?,
    };
    let a2 = tape.matmul(st, as_)?;
    Ok((x, a2))
}

/// Differentiable pooling with a learned soft assignment.
///
/// `Z = embed(X, A)`, `S = row_softmax(assign(X, A))`, `X' = SᵀZ`,
/// `A' = SᵀAS` (dense). A graph with fewer nodes than `clusters` uses only
/// its first `n` assignment columns, so no pooled graph grows.
#[derive(Clone, Debug)]
pub struct DiffPoolLayer {
    pub embed_gnn: SageLayer,
    pub assign_gnn: SageLayer,
    pub clusters: usize,
}

impl DiffPoolLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        clusters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if clusters < 1 {
            return Err(Error::Argument("diffpool needs at least one cluster".into()));
        }
        Ok(Self {
            embed_gnn: SageLayer::new(store, &format!("{name}.embed"), in_dim, out_dim, Activation::Relu, rng),
            assign_gnn: SageLayer::new(
                store,
                &format!("{name}.assign"),
                in_dim,
                clusters,
                Activation::Identity,
                rng,
            ),
            clusters,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.embed_gnn.out_dim()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        adj: &Adjacency,
        x: Var,
        node_to_graph: &[usize],
        num_graphs: usize,
    ) -> Result<PoolResult> {
        let z = self.embed_gnn.forward(tape, store, adj, x)?;
        let logits = self.assign_gnn.forward(tape, store, adj, x)?;
        let ranges = segment_ranges(node_to_graph, num_graphs)?;

        let mut xs = Vec::with_capacity(num_graphs);
        let mut blocks = Vec::with_capacity(num_graphs);
        let mut sizes = Vec::with_capacity(num_graphs);
        let mut assignments = Vec::with_capacity(num_graphs);
        let mut new_map = Vec::new();
        let mut dense_offset = 0;
        for (g, range) in ranges.into_iter().enumerate() {
            let n = range.len();
            if n == 0 {
                continue;
            }
            let rows: Vec<usize> = range.clone().collect();
            let mut l = tape.index_select_rows(logits, &rows)?;
            let m = self.clusters.min(n);
            if m < self.clusters {
                let lt = tape.transpose(l)?;
                let cols: Vec<usize> = (0..m).collect();
                let lt = tape.index_select_rows(lt, &cols)?;
                l = tape.transpose(lt)?;
            }
            let s = tape.row_softmax(l)?;
            let zb = tape.index_select_rows(z, &rows)?;
            let block = match adj {
                Adjacency::Sparse(ops) => AdjacencyBlock::Sparse(Arc::new(ops.raw.principal_submatrix(&rows)?)),
                Adjacency::Dense(d) => {
                    if d.sizes.get(g) != Some(&n) {
                        return Err(Error::dim("diff_pool", &[n], &d.sizes));
                    }
                    AdjacencyBlock::Dense(d.blocks[g])
                }
            };
            debug_assert_eq!(range.start, dense_offset);
            dense_offset += n;
            let (xp, ap) = assignment_coarsen(tape, s, zb, &block)?;
            xs.push(xp);
            blocks.push(ap);
            sizes.push(m);
            assignments.push(s);
            new_map.extend(std::iter::repeat_n(g, m));
        }
        if xs.is_empty() {
            return Err(Error::Argument("diff_pool over an empty batch".into()));
        }
        let x_pooled = tape.concat_rows(&xs)?;
        Ok(PoolResult {
            x: x_pooled,
            adjacency: Adjacency::Dense(DenseBlocks { blocks, sizes }),
            provenance: Provenance::Assignment(assignments),
            node_to_graph: new_map,
        })
    }
}

/// Any hierarchical (node-reducing) pooling layer.
#[derive(Clone, Debug)]
pub enum PoolLayer {
    DiffPool(DiffPoolLayer),
    Topk(TopkLayer),
    Sag(SagLayer),
}

impl PoolLayer {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        adj: &Adjacency,
        x: Var,
        node_to_graph: &[usize],
        num_graphs: usize,
    ) -> Result<PoolResult> {
        match self {
            PoolLayer::DiffPool(l) => l.forward(tape, store, adj, x, node_to_graph, num_graphs),
            PoolLayer::Topk(l) => l.forward(tape, store, adj, x, node_to_graph, num_graphs),
            PoolLayer::Sag(l) => l.forward(tape, store, adj, x, node_to_graph, num_graphs),
        }
    }

    /// Feature width after pooling given the input width.
    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            PoolLayer::DiffPool(l) => l.out_dim(),
            PoolLayer::Topk(_) | PoolLayer::Sag(_) => in_dim,
        }
    }
}
