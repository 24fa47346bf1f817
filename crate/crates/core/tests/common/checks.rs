//! Seeded checks shared by the property tests and the acceptance harness.
//! Each takes a seed, builds one random case and returns a measurement or
//! a description of the violation.

use rand::Rng;

use graphpool::autodiff::gradcheck::check_params;
use graphpool::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use graphpool::conv::{Activation, Adjacency, ConvKind, ConvLayer, GcnLayer, SageLayer, TagcnLayer};
use graphpool::graph::{batch_graphs, Graph, GraphOperators, SparseMatrix};
use graphpool::pool::{
    global_mean_readout, sort_pool, DiffPoolLayer, PoolResult, PoolSize, Provenance, SagLayer, SortPoolReadout,
    TopkLayer,
};
use graphpool::train::{Architecture, Batch, DataShape, HyperParams, PreparedGraph};

use super::*;

/// Gradient steps stay this far from relu kinks and selection boundaries.
pub const KINK_MARGIN: f64 = 1e-3;

/// The seven layer types under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Gcn,
    Sage,
    Tagcn,
    SortPool,
    DiffPool,
    Topk,
    SagPool,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Gcn,
        LayerKind::Sage,
        LayerKind::Tagcn,
        LayerKind::SortPool,
        LayerKind::DiffPool,
        LayerKind::Topk,
        LayerKind::SagPool,
    ];
}

/// Overwrites every parameter with uniform values in `[-1, 1)`.
pub fn randomize<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let shape = t.shape().to_vec();
        let values = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        *store.get_mut(id) = Tensor::new(shape, values).unwrap().with_requires_grad(true);
    }
}

fn p(store: &ParamStore, id: ParamId) -> Mat {
    store.get(id).to_rows()
}

fn row(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).values().to_vec()
}

fn sparse(a: &SparseMatrix) -> Adjacency {
    Adjacency::Sparse(GraphOperators::new(a.clone()).unwrap())
}

fn kept(r: &PoolResult) -> Vec<usize> {
    match &r.provenance {
        Provenance::Kept(k) => k.clone(),
        Provenance::Assignment(_) => panic!("selection pooling reports kept indices"),
    }
}

fn dense_block(tape: &Tape, adj: &Adjacency) -> Mat {
    match adj {
        Adjacency::Sparse(ops) => ops.raw.to_dense().to_rows(),
        Adjacency::Dense(d) => tape.value(d.blocks[0]).to_rows(),
    }
}

fn track(worst: &mut f64, what: &str, d: f64, log: &mut Vec<String>) {
    if d > *worst {
        *worst = d;
    }
    if d.is_nan() || d > 1e-10 {
        log.push(format!("{what}: {d:e}"));
    }
}

/// Largest deviation between every layer's forward output and the dense
/// reference on one random graph with `n ≤ 8`.
pub fn oracle_case(seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let a = random_graph(&mut rng, 8);
    let n = a.n_rows();
    let c = rng.gen_range(1..=4);
    let h = rng.gen_range(1..=4);
    let ad = a.to_dense().to_rows();
    let xt = random_matrix(&mut rng, n, c);
    let xd = xt.to_rows();
    let adj = sparse(&a);
    let mut worst = 0.0;
    let mut log = Vec::new();

    let ops = GraphOperators::new(a.clone()).unwrap();
    track(
        &mut worst,
        "gcn norm",
        max_abs_diff(&ops.gcn.to_dense().to_rows(), &gcn_norm(&ad)),
        &mut log,
    );
    track(
        &mut worst,
        "tagcn norm",
        max_abs_diff(&ops.tagcn.to_dense().to_rows(), &tagcn_norm(&ad)),
        &mut log,
    );
    track(
        &mut worst,
        "mean norm",
        max_abs_diff(&ops.mean.to_dense().to_rows(), &mean_norm(&ad)),
        &mut log,
    );

    let mut store = ParamStore::new();
    let gcn = GcnLayer::new(&mut store, "gcn", c, h, Activation::Relu, &mut rng);
    let sage = SageLayer::new(&mut store, "sage", c, h, Activation::Relu, &mut rng);
    let order = rng.gen_range(0..=3);
    let tagcn = TagcnLayer::new(&mut store, "tagcn", c, h, order, Activation::Relu, &mut rng);
    let ratio = rng.gen_range(0.2..=1.0);
    let topk = TopkLayer::new(&mut store, "topk", c, PoolSize::Ratio(ratio), &mut rng);
    let sag = SagLayer::new(&mut store, "sag", c, PoolSize::Ratio(ratio), &mut rng);
    let clusters = rng.gen_range(1..=n + 2);
    let diff = DiffPoolLayer::new(&mut store, "diff", c, h, clusters, &mut rng).unwrap();
    randomize(&mut store, &mut rng);

    let mut tape = Tape::new();
    let x = tape.constant(xt.clone());

    let y = gcn.forward(&mut tape, &store, &adj, x).unwrap();
    let want = gcn_layer(&ad, &xd, &p(&store, gcn.weight), &row(&store, gcn.bias), true);
    track(
        &mut worst,
        "gcn",
        max_abs_diff(&tape.value(y).to_rows(), &want),
        &mut log,
    );

    let y = sage.forward(&mut tape, &store, &adj, x).unwrap();
    let want = sage_layer(&ad, &xd, &p(&store, sage.weight), &row(&store, sage.bias), true);
    track(
        &mut worst,
        "sage",
        max_abs_diff(&tape.value(y).to_rows(), &want),
        &mut log,
    );

    let y = tagcn.forward(&mut tape, &store, &adj, x).unwrap();
    let ws: Vec<Mat> = tagcn.weights.iter().map(|&w| p(&store, w)).collect();
    let want = tagcn_layer(&ad, &xd, &ws, &row(&store, tagcn.bias), true);
    track(
        &mut worst,
        "tagcn",
        max_abs_diff(&tape.value(y).to_rows(), &want),
        &mut log,
    );

    let k = PoolSize::Ratio(ratio).for_nodes(n);
    let r = topk.forward(&mut tape, &store, &adj, x, &vec![0; n], 1).unwrap();
    let (idx, wx, wa) = topk_pool(&ad, &xd, &row(&store, topk.projection), k);
    if kept(&r) != idx {
        return Err(format!("topk kept {:?}, reference {idx:?}", kept(&r)));
    }
    track(
        &mut worst,
        "topk x",
        max_abs_diff(&tape.value(r.x).to_rows(), &wx),
        &mut log,
    );
    track(
        &mut worst,
        "topk a",
        max_abs_diff(&dense_block(&tape, &r.adjacency), &wa),
        &mut log,
    );

    let r = sag.forward(&mut tape, &store, &adj, x, &vec![0; n], 1).unwrap();
    let sb = row(&store, sag.score_gnn.bias)[0];
    let (idx, wx, wa) = sag_pool(&ad, &xd, &p(&store, sag.score_gnn.weight), sb, k);
    if kept(&r) != idx {
        return Err(format!("sagpool kept {:?}, reference {idx:?}", kept(&r)));
    }
    track(
        &mut worst,
        "sag x",
        max_abs_diff(&tape.value(r.x).to_rows(), &wx),
        &mut log,
    );
    track(
        &mut worst,
        "sag a",
        max_abs_diff(&dense_block(&tape, &r.adjacency), &wa),
        &mut log,
    );

    let r = diff.forward(&mut tape, &store, &adj, x, &vec![0; n], 1).unwrap();
    let (s, wx, wa) = diff_pool(
        &ad,
        &xd,
        &p(&store, diff.embed_gnn.weight),
        &row(&store, diff.embed_gnn.bias),
        &p(&store, diff.assign_gnn.weight),
        &row(&store, diff.assign_gnn.bias),
        clusters.min(n),
    );
    let Provenance::Assignment(ss) = &r.provenance else {
        return Err("diffpool must report its assignment".into());
    };
    track(
        &mut worst,
        "diff s",
        max_abs_diff(&tape.value(ss[0]).to_rows(), &s),
        &mut log,
    );
    track(
        &mut worst,
        "diff x",
        max_abs_diff(&tape.value(r.x).to_rows(), &wx),
        &mut log,
    );
    track(
        &mut worst,
        "diff a",
        max_abs_diff(&dense_block(&tape, &r.adjacency), &wa),
        &mut log,
    );

    let ks = rng.gen_range(1..=n + 2);
    let y = sort_pool(&mut tape, &[x], &vec![0; n], 1, ks).unwrap();
    track(
        &mut worst,
        "sortpool",
        max_abs_diff(&tape.value(y).to_rows(), &super::sort_pool(&xd, ks)),
        &mut log,
    );

    let y = global_mean_readout(&mut tape, x, &vec![0; n], 1).unwrap();
    track(
        &mut worst,
        "readout",
        max_abs_diff(&tape.value(y).to_rows(), &vec![mean_rows(&xd)]),
        &mut log,
    );

    if log.is_empty() {
        Ok(worst)
    } else {
        Err(log.join("; "))
    }
}

fn min_abs(t: &Tensor) -> f64 {
    t.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Smallest gap between any two distinct entries.
fn min_gap(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn with_identity(layer: &ConvLayer) -> ConvLayer {
    let mut layer = layer.clone();
    match &mut layer {
        ConvLayer::Gcn(l) => l.activation = Activation::Identity,
        ConvLayer::Sage(l) => l.activation = Activation::Identity,
        ConvLayer::Tagcn(l) => l.activation = Activation::Identity,
    }
    layer
}

/// Gradient check of `layer → readout → dense → cross-entropy` w.r.t. the
/// inputs and every parameter. Returns `None` when the random case lies
/// within [`KINK_MARGIN`] of a relu kink or a selection boundary.
pub fn gradient_case(kind: LayerKind, seed: u64) -> Result<Option<f64>, String> {
    let mut rng = rng(seed);
    let n = rng.gen_range(2..=8);
    let density = rng.gen_range(0.3..0.8);
    let a = SparseMatrix::from_undirected_edges(n, &random_edges(&mut rng, n, density)).unwrap();
    let adj = sparse(&a);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=3);
    let label = rng.gen_range(0..2);
    let g2n = vec![0; n];

    let mut store = ParamStore::new();
    let xid = store.add("x", random_matrix(&mut rng, n, c).with_requires_grad(true));
    enum Body {
        Conv(ConvLayer),
        Topk(TopkLayer),
        Sag(SagLayer),
        Diff(DiffPoolLayer),
        Sort(SortPoolReadout),
    }
    let body = match kind {
        LayerKind::Gcn => Body::Conv(ConvLayer::new(
            ConvKind::Gcn,
            &mut store,
            "l",
            c,
            h,
            0,
            Activation::Relu,
            &mut rng,
        )),
        LayerKind::Sage => Body::Conv(ConvLayer::new(
            ConvKind::Sage,
            &mut store,
            "l",
            c,
            h,
            0,
            Activation::Relu,
            &mut rng,
        )),
        LayerKind::Tagcn => {
            let order = rng.gen_range(1..=3);
            Body::Conv(ConvLayer::new(
                ConvKind::Tagcn,
                &mut store,
                "l",
                c,
                h,
                order,
                Activation::Relu,
                &mut rng,
            ))
        }
        LayerKind::Topk => Body::Topk(TopkLayer::new(&mut store, "l", c, PoolSize::Ratio(0.5), &mut rng)),
        LayerKind::SagPool => Body::Sag(SagLayer::new(&mut store, "l", c, PoolSize::Ratio(0.5), &mut rng)),
        LayerKind::DiffPool => {
            let clusters = rng.gen_range(1..=n);
            Body::Diff(DiffPoolLayer::new(&mut store, "l", c, h, clusters, &mut rng).unwrap())
        }
        LayerKind::SortPool => {
            let k = rng.gen_range(1..=n + 1);
            Body::Sort(SortPoolReadout::new(&mut store, k, c, 3, &mut rng))
        }
    };
    let head_in = match &body {
        Body::Conv(_) | Body::Diff(_) => h,
        Body::Topk(_) | Body::Sag(_) => c,
        Body::Sort(r) => r.out_dim(),
    };
    let hw = store.add_glorot("head.w", head_in, 2, &mut rng);
    let hb = store.add_zeros("head.b", &[1, 2]);
    randomize(&mut store, &mut rng);

    // reject cases near non-differentiable points
    let mut tape = Tape::new();
    let x = tape.param(&store, xid);
    let safe = match &body {
        Body::Conv(l) => {
            let pre = with_identity(l).forward(&mut tape, &store, &adj, x).unwrap();
            min_abs(tape.value(pre)) > KINK_MARGIN
        }
        Body::Diff(l) => {
            let mut embed = l.embed_gnn.clone();
            embed.activation = Activation::Identity;
            let pre = embed.forward(&mut tape, &store, &adj, x).unwrap();
            min_abs(tape.value(pre)) > KINK_MARGIN
        }
        Body::Topk(l) => {
            let y = l.scores(&mut tape, &store, x).unwrap();
            min_gap(tape.value(y).values()) > KINK_MARGIN
        }
        Body::Sag(l) => {
            let y = l.score_gnn.forward(&mut tape, &store, &adj, x).unwrap();
            min_gap(tape.value(y).values()) > KINK_MARGIN
        }
        Body::Sort(r) => {
            let last: Vec<f64> = (0..n).map(|i| tape.value(x).get(i, c - 1)).collect();
            let sorted = sort_pool(&mut tape, &[x], &g2n, 1, r.k).unwrap();
            let w = tape.param(&store, r.kernel);
            let b = tape.param(&store, r.bias);
            let pre = tape.matmul(sorted, w).unwrap();
            let pre = tape.add_bias(pre, b).unwrap();
            // padded rows are exactly the bias; only real rows can cross a kink
            let real = r.k.min(n);
            let rows: Vec<usize> = (0..real).collect();
            let pre = tape.index_select_rows(pre, &rows).unwrap();
            min_gap(&last) > KINK_MARGIN
                && min_abs(tape.value(pre)) > KINK_MARGIN
                && min_abs(store.get(r.bias)) > KINK_MARGIN
        }
    };
    if !safe {
        return Ok(None);
    }

    let loss = |tape: &mut Tape, store: &ParamStore| -> graphpool::Result<Var> {
        let x = tape.param(store, xid);
        let feats = match &body {
            Body::Conv(l) => {
                let y = l.forward(tape, store, &adj, x)?;
                global_mean_readout(tape, y, &g2n, 1)?
            }
            Body::Topk(l) => {
                let r = l.forward(tape, store, &adj, x, &g2n, 1)?;
                global_mean_readout(tape, r.x, &r.node_to_graph, 1)?
            }
            Body::Sag(l) => {
                let r = l.forward(tape, store, &adj, x, &g2n, 1)?;
                global_mean_readout(tape, r.x, &r.node_to_graph, 1)?
            }
            Body::Diff(l) => {
                let r = l.forward(tape, store, &adj, x, &g2n, 1)?;
                global_mean_readout(tape, r.x, &r.node_to_graph, 1)?
            }
            Body::Sort(r) => r.forward(tape, store, &[x], &g2n, 1)?,
        };
        let w = tape.param(store, hw);
        let b = tape.param(store, hb);
        let logits = tape.matmul(feats, w)?;
        let logits = tape.add_bias(logits, b)?;
        tape.cross_entropy(logits, &[label])
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let report = check_params(&store, &ids, 1e-5, loss).map_err(|e| e.to_string())?;
    Ok(Some(report.max_rel_error))
}

/// `conv(PAPᵀ, PX) = P conv(A, X)` for all three convolutions.
pub fn conv_equivariance(seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let a = random_graph(&mut rng, 8);
    let n = a.n_rows();
    let perm = random_permutation(&mut rng, n);
    let x = random_matrix(&mut rng, n, 3);
    let mut px = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        for j in 0..3 {
            px.values_mut()[perm[i] * 3 + j] = x.get(i, j);
        }
    }
    let pa = a.permuted(&perm).unwrap();
    let mut worst: f64 = 0.0;
    for kind in ConvKind::ALL {
        let mut store = ParamStore::new();
        let layer = ConvLayer::new(kind, &mut store, "l", 3, 4, 2, Activation::Relu, &mut rng);
        randomize(&mut store, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pxv = tape.constant(px.clone());
        let y = layer.forward(&mut tape, &store, &sparse(&a), xv).unwrap();
        let py = layer.forward(&mut tape, &store, &sparse(&pa), pxv).unwrap();
        for i in 0..n {
            for j in 0..4 {
                worst = worst.max((tape.value(y).get(i, j) - tape.value(py).get(perm[i], j)).abs());
            }
        }
    }
    Ok(worst)
}

fn is_symmetric(m: &Mat, tol: f64) -> bool {
    (0..m.len()).all(|i| (0..m.len()).all(|j| (m[i][j] - m[j][i]).abs() <= tol))
}

/// Runs Top-k, SagPool and DiffPool on a random two-graph batch and checks:
/// pooled adjacency symmetric, |x'| ≤ |x| row-wise for the gated pools,
/// `a'[u,v] = a[idx u, idx v]`, S row-stochastic and nonnegative, and
/// `n' ≤ n` per graph.
pub fn pooling_invariants(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let g1 = random_graph(&mut rng, 8);
    let g2 = random_graph(&mut rng, 8);
    let (n1, n2) = (g1.n_rows(), g2.n_rows());
    let a = SparseMatrix::block_diag(&[&g1, &g2]);
    let ad = a.to_dense().to_rows();
    let n = n1 + n2;
    let g2n: Vec<usize> = (0..n).map(|i| usize::from(i >= n1)).collect();
    let xt = random_matrix(&mut rng, n, 3);
    let xd = xt.to_rows();
    let adj = sparse(&a);
    let ratio = rng.gen_range(0.1..=1.0);
    let mut store = ParamStore::new();
    let topk = TopkLayer::new(&mut store, "t", 3, PoolSize::Ratio(ratio), &mut rng);
    let sag = SagLayer::new(&mut store, "s", 3, PoolSize::Ratio(ratio), &mut rng);
    let diff = DiffPoolLayer::new(&mut store, "d", 3, 2, rng.gen_range(1..=10), &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(xt);

    for (name, r) in [
        ("topk", topk.forward(&mut tape, &store, &adj, x, &g2n, 2).unwrap()),
        ("sagpool", sag.forward(&mut tape, &store, &adj, x, &g2n, 2).unwrap()),
    ] {
        let idx = kept(&r);
        let pa = dense_block(&tape, &r.adjacency);
        if !is_symmetric(&pa, 0.0) {
            return Err(format!("{name}: pooled adjacency not symmetric"));
        }
        for (u, &iu) in idx.iter().enumerate() {
            for (v, &iv) in idx.iter().enumerate() {
                if pa[u][v] != ad[iu][iv] {
                    return Err(format!("{name}: a'[{u},{v}] != a[{iu},{iv}]"));
                }
            }
            for j in 0..3 {
                if tape.value(r.x).get(u, j).abs() > xd[iu][j].abs() {
                    return Err(format!("{name}: gating grew entry ({u},{j})"));
                }
            }
        }
        let per = |g: usize| r.node_to_graph.iter().filter(|&&b| b == g).count();
        if per(0) > n1 || per(1) > n2 || r.node_to_graph.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("{name}: bad node_to_graph {:?}", r.node_to_graph));
        }
        if idx.iter().zip(&r.node_to_graph).any(|(&i, &g)| g2n[i] != g) {
            return Err(format!("{name}: node moved between graphs"));
        }
    }

    let r = diff.forward(&mut tape, &store, &adj, x, &g2n, 2).unwrap();
    let Provenance::Assignment(ss) = &r.provenance else {
        return Err("diffpool must report its assignment".into());
    };
    let Adjacency::Dense(blocks) = &r.adjacency else {
        return Err("diffpool adjacency must be dense".into());
    };
    for (b, (s, &size)) in ss.iter().zip(&blocks.sizes).enumerate() {
        let s = tape.value(*s);
        let nb = if b == 0 { n1 } else { n2 };
        if size > nb || s.rows() != nb || s.cols() != size {
            return Err(format!("diffpool graph {b}: {nb} nodes pooled to {size}"));
        }
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-12 || s.row(i).iter().any(|&v| v < 0.0) {
                return Err(format!("diffpool S row {i} not stochastic"));
            }
        }
        if !is_symmetric(&tape.value(blocks.blocks[b]).to_rows(), 1e-12) {
            return Err(format!("diffpool graph {b}: SᵀAS not symmetric"));
        }
    }
    Ok(())
}

/// `(PS)ᵀ (P A Pᵀ) (PS) = SᵀAS` with small-integer `S` and `A`, where every
/// sum is exact, so the comparison is bitwise.
pub fn diffpool_permutation_identity(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let n = rng.gen_range(1..=8);
    let m = rng.gen_range(1..=4);
    let a: Mat = {
        let mut a = zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = f64::from(rng.gen_range(0..2u8));
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        a
    };
    let s: Mat = (0..n)
        .map(|_| (0..m).map(|_| f64::from(rng.gen_range(0..5u8))).collect())
        .collect();
    let perm = random_permutation(&mut rng, n);
    let mut ps = zeros(n, m);
    let mut pa = zeros(n, n);
    for i in 0..n {
        ps[perm[i]] = s[i].clone();
        for j in 0..n {
            pa[perm[i]][perm[j]] = a[i][j];
        }
    }
    let mut tape = Tape::new();
    let coarsen = |tape: &mut Tape, s: &Mat, a: &Mat| {
        let sv = tape.constant(Tensor::from_rows(s).unwrap());
        let av = tape.constant(Tensor::from_rows(a).unwrap());
        let z = tape.constant(Tensor::zeros(&[n, 1]));
        let (_, out) =
            graphpool::pool::assignment_coarsen(tape, sv, z, &graphpool::pool::AdjacencyBlock::Dense(av)).unwrap();
        tape.value(out).clone()
    };
    let lhs = coarsen(&mut tape, &ps, &pa);
    let rhs = coarsen(&mut tape, &s, &a);
    if lhs != rhs {
        return Err(format!("{lhs:?} != {rhs:?}"));
    }
    Ok(())
}

/// SortPool always yields `k × C`, whatever `n`.
pub fn sortpool_extent(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let n = rng.gen_range(1..=12);
    let k = rng.gen_range(1..=12);
    let c = rng.gen_range(1..=4);
    let layers = rng.gen_range(1..=3);
    let mut tape = Tape::new();
    let parts: Vec<Var> = (0..layers)
        .map(|_| tape.constant(random_matrix(&mut rng, n, c)))
        .collect();
    let y = sort_pool(&mut tape, &parts, &vec![0; n], 1, k).unwrap();
    if tape.shape(y) != [k, c * layers] {
        return Err(format!("shape {:?} for n={n} k={k} C={}", tape.shape(y), c * layers));
    }
    Ok(())
}

/// Relabelling nodes leaves the multiset of pooled (gated row, induced
/// edges) unchanged for Top-k and SagPool when scores are distinct.
pub fn selection_permutation_invariance(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let a = random_graph(&mut rng, 8);
    let n = a.n_rows();
    let perm = random_permutation(&mut rng, n);
    let x = random_matrix(&mut rng, n, 2);
    let mut px = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        for j in 0..2 {
            px.values_mut()[perm[i] * 2 + j] = x.get(i, j);
        }
    }
    let pa = a.permuted(&perm).unwrap();
    let mut store = ParamStore::new();
    let topk = TopkLayer::new(&mut store, "t", 2, PoolSize::Ratio(0.5), &mut rng);
    let sag = SagLayer::new(&mut store, "s", 2, PoolSize::Ratio(0.5), &mut rng);
    randomize(&mut store, &mut rng);

    // canonical form: sorted list of (row bits, sorted neighbour row bits)
    let canon = |tape: &Tape, r: &PoolResult| {
        let xs = tape.value(r.x);
        let pa = dense_block(tape, &r.adjacency);
        let bits = |u: usize| xs.row(u).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut items: Vec<(Vec<u64>, Vec<Vec<u64>>)> = (0..xs.rows())
            .map(|u| {
                let mut nb: Vec<Vec<u64>> = (0..xs.rows()).filter(|&v| pa[u][v] != 0.0).map(bits).collect();
                nb.sort();
                (bits(u), nb)
            })
            .collect();
        items.sort();
        items
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pxv = tape.constant(px);
    let g2n = vec![0; n];
    let ys = topk.scores(&mut tape, &store, xv).unwrap();
    let ya = sag.score_gnn.forward(&mut tape, &store, &sparse(&a), xv).unwrap();
    if min_gap(tape.value(ys).values()) == 0.0 || min_gap(tape.value(ya).values()) == 0.0 {
        return Ok(());
    }
    let r1 = topk.forward(&mut tape, &store, &sparse(&a), xv, &g2n, 1).unwrap();
    let r2 = topk.forward(&mut tape, &store, &sparse(&pa), pxv, &g2n, 1).unwrap();
    if canon(&tape, &r1) != canon(&tape, &r2) {
        return Err("topk pooled multiset changed under relabelling".into());
    }
    let r1 = sag.forward(&mut tape, &store, &sparse(&a), xv, &g2n, 1).unwrap();
    let r2 = sag.forward(&mut tape, &store, &sparse(&pa), pxv, &g2n, 1).unwrap();
    // GCN scores are equivariant only up to rounding; compare to tolerance
    let (c1, c2) = (canon(&tape, &r1), canon(&tape, &r2));
    if c1.len() != c2.len() {
        return Err("sagpool kept a different number of nodes".into());
    }
    let close = |p: &[u64], q: &[u64]| {
        p.iter()
            .zip(q)
            .all(|(a, b)| (f64::from_bits(*a) - f64::from_bits(*b)).abs() < 1e-12)
    };
    let mut v1: Vec<Vec<u64>> = c1.iter().map(|(r, _)| r.clone()).collect();
    let mut v2: Vec<Vec<u64>> = c2.iter().map(|(r, _)| r.clone()).collect();
    let key = |r: &Vec<u64>| r.iter().map(|b| f64::from_bits(*b)).collect::<Vec<_>>();
    v1.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    v2.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    if !v1.iter().zip(&v2).all(|(p, q)| close(p, q)) {
        return Err("sagpool pooled rows changed under relabelling".into());
    }
    let edges = |c: &[(Vec<u64>, Vec<Vec<u64>>)]| c.iter().map(|(_, nb)| nb.len()).sum::<usize>();
    if edges(&c1) != edges(&c2) {
        return Err("sagpool induced edge count changed under relabelling".into());
    }
    Ok(())
}

/// Batched logits equal per-graph logits for every conv × pool model: no
/// information crosses graph boundaries.
pub fn batch_no_leakage(seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let graphs: Vec<PreparedGraph> = (0..3)
        .map(|i| {
            let a = random_graph(&mut rng, 7);
            let n = a.n_rows();
            let g = Graph::new(i, a, random_matrix(&mut rng, n, 2), 0).unwrap();
            PreparedGraph::new(&g).unwrap()
        })
        .collect();
    let refs: Vec<&PreparedGraph> = graphs.iter().collect();
    let shape = DataShape::of(&graphs, 2);
    let mut worst: f64 = 0.0;
    for conv in ConvKind::ALL {
        for pool in graphpool::pool::PoolKind::ALL {
            let hp = HyperParams {
                num_conv_layers: 2,
                hidden_channels: 3,
                seed,
                ..HyperParams::new(conv, pool)
            };
            let mut store = ParamStore::new();
            let arch = Architecture::new(&hp, shape, &mut store, &mut rng).unwrap();
            randomize(&mut store, &mut rng);
            let mut tape = Tape::new();
            let all = arch
                .logits(&mut tape, &store, &Batch::new(&refs).unwrap(), None)
                .unwrap();
            let all = tape.value(all).to_rows();
            for (b, g) in refs.iter().enumerate() {
                let mut t = Tape::new();
                let one = arch.logits(&mut t, &store, &Batch::new(&[*g]).unwrap(), None).unwrap();
                let d = max_abs_diff(&vec![all[b].clone()], &t.value(one).to_rows());
                if d.is_nan() || d > 1e-10 {
                    return Err(format!("{conv}/{pool}: graph {b} differs by {d:e}"));
                }
                worst = worst.max(d);
            }
        }
    }
    let _ = batch_graphs(&[Graph::new(0, SparseMatrix::zeros(1, 1), Tensor::zeros(&[1, 1]), 0).unwrap()]);
    Ok(worst)
}
