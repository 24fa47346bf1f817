//! Graph convolution layers: GCN, GraphSAGE (mean aggregator) and TAGCN.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{DenseNorm, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphOperators, SparseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConvKind {
    Gcn,
    Sage,
    Tagcn,
}

impl ConvKind {
    pub const ALL: [ConvKind; 3] = [ConvKind::Gcn, ConvKind::Sage, ConvKind::Tagcn];

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Gcn => "gcn",
            ConvKind::Sage => "sage",
            ConvKind::Tagcn => "tagcn",
        }
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(ConvKind::Gcn),
            "sage" | "graphsage" => Ok(ConvKind::Sage),
            "tagcn" => Ok(ConvKind::Tagcn),
            other => Err(Error::Argument(format!(
                "unknown convolution {other:?} (expected gcn, sage or tagcn)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Which normalized operator a propagation step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    Gcn,
    Tagcn,
    Mean,
}

impl Propagation {
    fn dense_norm(self) -> DenseNorm {
        match self {
            Propagation::Gcn => DenseNorm::SelfLoopSymmetric,
            Propagation::Tagcn => DenseNorm::Symmetric,
            Propagation::Mean => DenseNorm::RowMean,
        }
    }
}

/// Per-graph dense adjacency blocks laid out along the node axis.
#[derive(Clone, Debug)]
pub struct DenseBlocks {
    pub blocks: Vec<Var>,
    pub sizes: Vec<usize>,
}

/// Adjacency seen by a layer: the sparse input graph, or the dense pooled
/// adjacency produced by DiffPool.
#[derive(Clone, Debug)]
pub enum Adjacency {
    Sparse(GraphOperators),
    Dense(DenseBlocks),
}

/// A propagation operator ready to be applied repeatedly.
#[derive(Clone, Debug)]
pub enum Operator {
    Sparse(Arc<SparseMatrix>),
    Dense { blocks: Vec<Var>, sizes: Vec<usize> },
}

impl Adjacency {
    pub fn num_nodes(&self) -> usize {
        match self {
            Adjacency::Sparse(ops) => ops.num_nodes(),
            Adjacency::Dense(d) => d.sizes.iter().sum(),
        }
    }

    pub fn operator(&self, tape: &mut Tape, prop: Propagation) -> Result<Operator> {
        match self {
            Adjacency::Sparse(ops) => Ok(Operator::Sparse(Arc::clone(match prop {
                Propagation::Gcn => &ops.gcn,
                Propagation::Tagcn => &ops.tagcn,
                Propagation::Mean => &ops.mean,
            }))),
            Adjacency::Dense(d) => {
                let blocks = d
                    .blocks
                    .iter()
                    .map(|&b| tape.dense_normalize(b, prop.dense_norm()))
                    .collect::<Result<_>>()?;
                Ok(Operator::Dense {
                    blocks,
                    sizes: d.sizes.clone(),
                })
            }
        }
    }
}

impl Operator {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Operator::Sparse(s) => tape.spmm(s, x),
            Operator::Dense { blocks, sizes } => {
                let rows = tape.value(x).rows();
                let total: usize = sizes.iter().sum();
                if rows != total {
                    return Err(Error::dim("dense propagate", tape.shape(x), &[total]));
                }
                let mut parts = Vec::with_capacity(blocks.len());
                let mut offset = 0;
                for (&block, &size) in blocks.iter().zip(sizes) {
                    let idx: Vec<usize> = (offset..offset + size).collect();
                    let xb = tape.index_select_rows(x, &idx)?;
                    parts.push(tape.matmul(block, xb)?);
                    offset += size;
                }
                tape.concat_rows(&parts)
            }
        }
    }
}

fn check_width(tape: &Tape, x: Var, expected: usize, op: &'static str) -> Result<()> {
    let (_, c) = tape.value(x).require_matrix(op)?;
    if c != expected {
        return Err(Error::dim(op, tape.shape(x), &[tape.value(x).rows(), expected]));
    }
    Ok(())
}

/// `σ(D̂^-1/2 Â D̂^-1/2 · X · W + b)`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), in_dim, out_dim, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[1, out_dim]),
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: &Adjacency, x: Var) -> Result<Var> {
        check_width(tape, x, self.in_dim, "gcn_forward")?;
        let op = adj.operator(tape, Propagation::Gcn)?;
        let ax = op.apply(tape, x)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(ax, w)?;
        let h = tape.add_bias(h, b)?;
        Ok(self.activation.apply(tape, h))
    }
}

/// GraphSAGE with the mean aggregator over the full neighborhood:
/// `σ([x_v ‖ mean_{u∈N(v)} x_u] · W + b)`; isolated nodes aggregate to zero.
#[derive(Clone, Debug)]
pub struct SageLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl SageLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), 2 * in_dim, out_dim, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[1, out_dim]),
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: &Adjacency, x: Var) -> Result<Var> {
        check_width(tape, x, self.in_dim, "sage_forward")?;
        let op = adj.operator(tape, Propagation::Mean)?;
        let neigh = op.apply(tape, x)?;
        let cat = tape.concat_cols(&[x, neigh])?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(cat, w)?;
        let h = tape.add_bias(h, b)?;
        Ok(self.activation.apply(tape, h))
    }
}

/// Degree-`K` polynomial filter `σ(Σ_{i=0..K} Ã^i X W_i + b)` with
/// `Ã = D^-1/2 A D^-1/2`. Powers are applied by repeated propagation.
#[derive(Clone, Debug)]
pub struct TagcnLayer {
    pub weights: Vec<ParamId>,
    pub bias: ParamId,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl TagcnLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        order: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weights = (0..=order)
            .map(|i| store.add_glorot(format!("{name}.weight{i}"), in_dim, out_dim, rng))
            .collect();
        Self {
            weights,
            bias: store.add_zeros(format!("{name}.bias"), &[1, out_dim]),
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn order(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: &Adjacency, x: Var) -> Result<Var> {
        check_width(tape, x, self.in_dim, "tagcn_forward")?;
        let op = if self.order() > 0 {
            Some(adj.operator(tape, Propagation::Tagcn)?)
        } else {
            None
        };
        let mut power = x;
        let mut acc: Option<Var> = None;
        for (i, &wid) in self.weights.iter().enumerate() {
            if i > 0 {
                power = op.as_ref().expect("order > 0").apply(tape, power)?;
            }
            let w = tape.param(store, wid);
            let term = tape.matmul(power, w)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let b = tape.param(store, self.bias);
        let h = tape.add_bias(acc.expect("at least W_0"), b)?;
        Ok(self.activation.apply(tape, h))
    }
}

/// Any of the three convolutions.
#[derive(Clone, Debug)]
pub enum ConvLayer {
    Gcn(GcnLayer),
    Sage(SageLayer),
    Tagcn(TagcnLayer),
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        kind: ConvKind,
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        order: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        match kind {
            ConvKind::Gcn => ConvLayer::Gcn(GcnLayer::new(store, name, in_dim, out_dim, activation, rng)),
            ConvKind::Sage => ConvLayer::Sage(SageLayer::new(store, name, in_dim, out_dim, activation, rng)),
            ConvKind::Tagcn => ConvLayer::Tagcn(TagcnLayer::new(store, name, in_dim, out_dim, order, activation, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: &Adjacency, x: Var) -> Result<Var> {
        match self {
            ConvLayer::Gcn(l) => l.forward(tape, store, adj, x),
            ConvLayer::Sage(l) => l.forward(tape, store, adj, x),
            ConvLayer::Tagcn(l) => l.forward(tape, store, adj, x),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ConvLayer::Gcn(l) => l.out_dim(),
            ConvLayer::Sage(l) => l.out_dim(),
            ConvLayer::Tagcn(l) => l.out_dim(),
        }
    }
}
