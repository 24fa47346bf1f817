use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{lr_at_epoch, AdamState, HyperParams};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::conv::{Activation, Adjacency, ConvLayer};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphOperators};
use crate::pool::{
    global_mean_readout, DiffPoolLayer, PoolKind, PoolLayer, PoolSize, SagLayer, SortPoolReadout, TopkLayer,
};

/// A graph with its propagation operators precomputed.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub ops: GraphOperators,
    pub features: Tensor,
    pub label: usize,
}

impl PreparedGraph {
    pub fn new(g: &Graph) -> Result<Self> {
        Ok(Self {
            ops: GraphOperators::new(g.adjacency.clone())?,
            features: g.features.clone(),
            label: g.label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.num_nodes()
    }
}

/// Several graphs as one block-diagonal graph.
#[derive(Clone, Debug)]
pub struct Batch {
    pub adjacency: Adjacency,
    pub features: Tensor,
    pub node_to_graph: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(graphs: &[&PreparedGraph]) -> Result<Self> {
        let width = graphs.first().map_or(0, |g| g.features.cols());
        let mut values = Vec::new();
        let mut node_to_graph = Vec::new();
        for (b, g) in graphs.iter().enumerate() {
            if g.features.cols() != width {
                return Err(Error::dim("batch", g.features.shape(), &[g.num_nodes(), width]));
            }
            values.extend_from_slice(g.features.values());
            node_to_graph.extend(std::iter::repeat_n(b, g.num_nodes()));
        }
        let ops: Vec<&GraphOperators> = graphs.iter().map(|g| &g.ops).collect();
        Ok(Self {
            adjacency: Adjacency::Sparse(GraphOperators::block_diag(&ops)),
            features: Tensor::new(vec![node_to_graph.len(), width], values)?,
            node_to_graph,
            labels: graphs.iter().map(|g| g.label).collect(),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }
}

/// Dataset-level sizes that fix pooling extents at build time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataShape {
    pub in_dim: usize,
    pub num_classes: usize,
    pub max_nodes: usize,
    pub mean_nodes: f64,
}

impl DataShape {
    pub fn of(graphs: &[PreparedGraph], num_classes: usize) -> Self {
        let n = graphs.len().max(1) as f64;
        Self {
            in_dim: graphs.first().map_or(0, |g| g.features.cols()),
            num_classes,
            max_nodes: graphs.iter().map(PreparedGraph::num_nodes).max().unwrap_or(1),
            mean_nodes: graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / n,
        }
    }
}

/// Layer layout of a classifier: conv stack, optional pooling, readout,
/// one dense layer.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub convs: Vec<ConvLayer>,
    /// `pools[l]` runs after convolution `l`.
    pub pools: Vec<Option<PoolLayer>>,
    pub sortpool: Option<SortPoolReadout>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub dropout: f64,
}

impl Architecture {
    pub fn new<R: Rng + ?Sized>(
        hp: &HyperParams,
        shape: DataShape,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        hp.validate()?;
        let h = hp.hidden_channels;
        let mut convs = Vec::with_capacity(hp.num_conv_layers);
        let mut pools = Vec::with_capacity(hp.num_conv_layers);
        let mut width = shape.in_dim;
        let mut clusters_from = shape.max_nodes as f64;
        for l in 0..hp.num_conv_layers {
            let conv = ConvLayer::new(
                hp.conv,
                store,
                &format!("conv{l}"),
                width,
                h,
                hp.order,
                Activation::Relu,
                rng,
            );
            width = conv.out_dim();
            convs.push(conv);
            let pool_here = hp.hierarchical || l + 1 == hp.num_conv_layers;
            let size = PoolSize::Ratio(hp.pool_ratio);
            let pool = match hp.pool {
                PoolKind::Topk if pool_here => Some(PoolLayer::Topk(TopkLayer::new(
                    store,
                    &format!("pool{l}"),
                    width,
                    size,
                    rng,
                ))),
                PoolKind::SagPool if pool_here => Some(PoolLayer::Sag(SagLayer::new(
                    store,
                    &format!("pool{l}"),
                    width,
                    size,
                    rng,
                ))),
                PoolKind::DiffPool if pool_here => {
                    let clusters = ((hp.pool_ratio * clusters_from).ceil() as usize).max(1);
                    clusters_from = clusters as f64;
                    Some(PoolLayer::DiffPool(DiffPoolLayer::new(
                        store,
                        &format!("pool{l}"),
                        width,
                        h,
                        clusters,
                        rng,
                    )?))
                }
                _ => None,
            };
            if let Some(p) = &pool {
                width = p.out_dim(width);
            }
            pools.push(pool);
        }
        let (sortpool, head_in) = if hp.pool == PoolKind::SortPool {
            let k = ((hp.pool_ratio * shape.mean_nodes).ceil() as usize).max(1);
            let total: usize = convs.iter().map(ConvLayer::out_dim).sum();
            let r = SortPoolReadout::new(store, k, total, hp.sortpool_kernels, rng);
            let out = r.out_dim();
            (Some(r), out)
        } else {
            (None, width)
        };
        let head_weight = store.add_glorot("head.weight", head_in, shape.num_classes, rng);
        let head_bias = store.add_zeros("head.bias", &[1, shape.num_classes]);
        Ok(Self {
            convs,
            pools,
            sortpool,
            head_weight,
            head_bias,
            dropout: hp.dropout,
        })
    }

    /// Class logits `B × classes`. Dropout is applied after every
    /// convolution when `rng` is given.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let num_graphs = batch.num_graphs();
        let mut x = tape.constant(batch.features.clone());
        let mut adj = batch.adjacency.clone();
        let mut node_to_graph = batch.node_to_graph.clone();
        let mut outputs = Vec::with_capacity(self.convs.len());
        for (conv, pool) in self.convs.iter().zip(&self.pools) {
            x = conv.forward(tape, store, &adj, x)?;
            if let Some(rng) = rng.as_deref_mut() {
                if self.dropout > 0.0 {
                    x = dropout(tape, x, self.dropout, rng)?;
                }
            }
            outputs.push(x);
            if let Some(pool) = pool {
                let r = pool.forward(tape, store, &adj, x, &node_to_graph, num_graphs)?;
                x = r.x;
                adj = r.adjacency;
                node_to_graph = r.node_to_graph;
            }
        }
        let features = match &self.sortpool {
            Some(readout) => readout.forward(tape, store, &outputs, &node_to_graph, num_graphs)?,
            None => global_mean_readout(tape, x, &node_to_graph, num_graphs)?,
        };
        let w = tape.param(store, self.head_weight);
        let b = tape.param(store, self.head_bias);
        let logits = tape.matmul(features, w)?;
        tape.add_bias(logits, b)
    }

    /// Mean cross-entropy of `batch`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let logits = self.logits(tape, store, batch, rng)?;
        tape.cross_entropy(logits, &batch.labels)
    }
}

/// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// A trained or freshly initialised classifier.
#[derive(Clone, Debug)]
pub struct Model {
    pub hp: HyperParams,
    pub arch: Architecture,
    pub store: ParamStore,
}

impl Model {
    pub fn new(hp: &HyperParams, shape: DataShape) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut store = ParamStore::new();
        let arch = Architecture::new(hp, shape, &mut store, &mut rng)?;
        Ok(Self {
            hp: hp.clone(),
            arch,
            store,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Predicted class per graph; ties go to the lower class index.
    pub fn predict(&self, graphs: &[&PreparedGraph]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(self.hp.batch_size.max(1)) {
            let batch = Batch::new(chunk)?;
            let mut tape = Tape::new();
            let logits = self.arch.logits(&mut tape, &self.store, &batch, None)?;
            let t = tape.value(logits);
            for r in 0..t.rows() {
                let row = t.row(r);
                let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Fraction of `graphs` classified correctly; 0 for an empty set.
pub fn accuracy(model: &Model, graphs: &[&PreparedGraph]) -> Result<f64> {
    if graphs.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(graphs)?;
    let hits = pred.iter().zip(graphs).filter(|(p, g)| **p == g.label).count();
    Ok(hits as f64 / graphs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub best_val_accuracy: f64,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    /// Mean training loss per epoch.
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
}

/// Trains a fresh model on `train` with mini-batch Adam and keeps the
/// parameters of the epoch with the highest validation accuracy (earliest
/// on ties). Without a validation set the final epoch is kept.
pub fn train_model(
    hp: &HyperParams,
    shape: DataShape,
    train: &[&PreparedGraph],
    val: &[&PreparedGraph],
) -> Result<TrainOutcome> {
    let mut model = Model::new(hp, shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x5eed));
    let mut adam = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best_val = accuracy(&model, val)?;
    let mut best_epoch = None;
    let mut best_params = None;
    let mut train_curve = Vec::with_capacity(hp.epochs);
    let mut val_curve = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        let lr = lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let graphs: Vec<&PreparedGraph> = chunk.iter().map(|&i| train[i]).collect();
            let batch = Batch::new(&graphs)?;
            let mut tape = Tape::new();
            let loss = model.arch.loss(&mut tape, &model.store, &batch, Some(&mut rng))?;
            let value = tape.value(loss).values()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    lr,
                    hp: hp.to_string(),
                });
            }
            total += value * chunk.len() as f64;
            model.store.zero_grad();
            tape.backward_into(loss, &mut model.store)?;
            adam.step(&mut model.store, lr);
        }
        train_curve.push(if train.is_empty() {
            0.0
        } else {
            total / train.len() as f64
        });

        let acc = accuracy(&model, val)?;
        val_curve.push(acc);
        if !val.is_empty() && (best_epoch.is_none() || acc > best_val) {
            best_val = acc;
            best_epoch = Some(epoch);
            best_params = Some(model.store.snapshot());
        }
        log::debug!("{hp} epoch {epoch} loss {:.4} val {acc:.4}", train_curve[epoch]);
    }
    if val.is_empty() {
        best_epoch = hp.epochs.checked_sub(1);
    } else if let Some(p) = best_params {
        model.store.restore(&p);
    }
    model.store.zero_grad();
    Ok(TrainOutcome {
        model,
        best_val_accuracy: best_val,
        best_epoch,
        train_curve,
        val_curve,
    })
}
