//! Python bindings: `import graphpool_py`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use graphpool::autodiff::{self, ParamStore, Tape, Tensor};
use graphpool::conv::{Activation, Adjacency, ConvKind, ConvLayer};
use graphpool::data::{self, DatasetName, DatasetSpec};
use graphpool::graph::{self as g, GraphOperators};
use graphpool::pool::{self, PoolKind};
use graphpool::train::{self, CvOptions, GridKind};
use graphpool::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::MissingFile(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    Tensor::from_rows(&rows).map_err(to_py)
}

/// Symmetric 0/1 adjacency in coordinate form.
#[pyclass(name = "SparseMatrix", frozen)]
struct PySparseMatrix {
    inner: g::SparseMatrix,
}

#[pymethods]
impl PySparseMatrix {
    /// Undirected graph on `n` nodes; self-loops are dropped.
    #[staticmethod]
    fn from_edges(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(Self {
            inner: g::SparseMatrix::from_undirected_edges(n, &edges).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n_rows(), self.inner.n_cols())
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        self.inner.to_dense().to_rows()
    }

    /// `D̂^-1/2 (A + I) D̂^-1/2`.
    fn normalize_gcn(&self) -> PyResult<Self> {
        Ok(Self {
            inner: g::normalize_gcn(&self.inner).map_err(to_py)?,
        })
    }

    /// `D^-1/2 A D^-1/2`, isolated nodes left at zero.
    fn normalize_tagcn(&self) -> PyResult<Self> {
        Ok(Self {
            inner: g::normalize_tagcn(&self.inner).map_err(to_py)?,
        })
    }

    fn matmul(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(g::spmm(&self.inner, &tensor(x)?).map_err(to_py)?.to_rows())
    }

    fn __repr__(&self) -> String {
        format!("SparseMatrix(shape={:?}, nnz={})", self.shape(), self.nnz())
    }
}

/// A loaded TU-format dataset.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Loads a known benchmark (`mutag`, `proteins`, ...) from under `root`.
    #[staticmethod]
    fn load(name: &str, root: PathBuf) -> PyResult<Self> {
        let name: DatasetName = name.parse().map_err(to_py)?;
        Ok(Self {
            inner: data::load_tu_dataset(&DatasetSpec::locate(name, &root)).map_err(to_py)?,
        })
    }

    /// Loads `dir/PREFIX_A.txt` and friends.
    #[staticmethod]
    fn load_dir(prefix: &str, dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_tu_dataset(&DatasetSpec::custom(prefix, dir)).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn feature_width(&self) -> usize {
        self.inner.feature_width
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    fn num_nodes(&self) -> Vec<usize> {
        self.inner.graphs.iter().map(|g| g.num_nodes()).collect()
    }

    fn adjacency(&self, index: usize) -> PyResult<PySparseMatrix> {
        let graph = self
            .inner
            .graphs
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("graph {index} out of range")))?;
        Ok(PySparseMatrix {
            inner: graph.adjacency.clone(),
        })
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = data::compute_dataset_stats(&self.inner).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("graphs", s.graphs)?;
        d.set_item("classes", s.classes)?;
        d.set_item("avg_nodes", s.avg_nodes)?;
        d.set_item("avg_edges_undirected", s.avg_edges_undirected)?;
        d.set_item("avg_edges_directed", s.avg_edges_directed)?;
        Ok(d)
    }

    /// Cross-validated accuracy of one conv × pool cell.
    #[pyo3(signature = (conv, pool, grid = "small", folds = 5, seed = 0, epochs = None, jobs = 1))]
    #[allow(clippy::too_many_arguments)]
    fn cross_validate<'py>(
        &self,
        py: Python<'py>,
        conv: &str,
        pool: &str,
        grid: &str,
        folds: usize,
        seed: u64,
        epochs: Option<usize>,
        jobs: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let conv: ConvKind = conv.parse().map_err(to_py)?;
        let pool: PoolKind = pool.parse().map_err(to_py)?;
        let grid: GridKind = grid.parse().map_err(to_py)?;
        let mut base = train::HyperParams::new(conv, pool);
        base.seed = seed;
        if let Some(e) = epochs {
            base.epochs = e;
        }
        let grid = train::build_grid(grid, &base);
        let opts = CvOptions { folds, seed, jobs };
        let dataset = &self.inner;
        let report = py
            .detach(|| train::cross_validate(&grid, dataset, &opts))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("mean", report.mean)?;
        d.set_item("std", report.std)?;
        d.set_item("folds", report.test_accuracies())?;
        d.set_item("winner", report.winner.describe())?;
        Ok(d)
    }
}

/// Writes a synthetic two-class TU dataset.
#[pyfunction]
#[pyo3(signature = (dir, prefix = "SYN", graphs = 60, seed = 0))]
fn write_synthetic(dir: PathBuf, prefix: &str, graphs: usize, seed: u64) -> PyResult<()> {
    data::write_tu_dataset(&dir, prefix, &data::synthetic_benchmark(graphs, seed)).map_err(to_py)
}

/// `0.01 · 0.5^⌊epoch/50⌋`.
#[pyfunction]
fn lr_at_epoch(epoch: usize) -> f64 {
    train::lr_at_epoch(epoch)
}

/// Indices of the `k` largest scores in ascending index order; ties favour
/// the lower index.
#[pyfunction]
fn topk_indices(scores: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    autodiff::topk_indices(&scores, k).map_err(to_py)
}

type Folds = Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>;

/// Stratified folds as `(train, val, test)` index lists.
#[pyfunction]
#[pyo3(signature = (labels, folds = 5, seed = 0))]
fn kfold_split(labels: Vec<usize>, folds: usize, seed: u64) -> PyResult<Folds> {
    Ok(train::kfold_split(&labels, folds, seed)
        .map_err(to_py)?
        .into_iter()
        .map(|s| (s.train, s.val, s.test))
        .collect())
}

/// Forward pass of one convolution with the given weights.
///
/// `weights` holds one `c × c'` matrix for GCN, one `2c × c'` matrix for
/// GraphSAGE and `K + 1` matrices for TAGCN. No activation is applied.
#[pyfunction]
fn conv_forward(
    kind: &str,
    adjacency: &PySparseMatrix,
    x: Vec<Vec<f64>>,
    weights: Vec<Vec<Vec<f64>>>,
    bias: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let kind: ConvKind = kind.parse().map_err(to_py)?;
    let x = tensor(x)?;
    let ws = weights.into_iter().map(tensor).collect::<PyResult<Vec<_>>>()?;
    let first = ws.first().ok_or_else(|| PyValueError::new_err("no weights"))?;
    let (in_dim, out_dim) = (x.cols(), first.cols());
    let order = ws.len().saturating_sub(1);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = ConvLayer::new(
        kind,
        &mut store,
        "conv",
        in_dim,
        out_dim,
        order,
        Activation::Identity,
        &mut rng,
    );
    let ids: Vec<_> = match &layer {
        ConvLayer::Gcn(l) => vec![l.weight],
        ConvLayer::Sage(l) => vec![l.weight],
        ConvLayer::Tagcn(l) => l.weights.clone(),
    };
    if ids.len() != ws.len() {
        return Err(PyValueError::new_err(format!(
            "{kind} expects {} weight matrices",
            ids.len()
        )));
    }
    for (id, w) in ids.into_iter().zip(ws) {
        if store.get(id).shape() != w.shape() {
            return Err(PyValueError::new_err(format!(
                "weight shape {:?}, expected {:?}",
                w.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = w;
    }
    let bias_id = match &layer {
        ConvLayer::Gcn(l) => l.bias,
        ConvLayer::Sage(l) => l.bias,
        ConvLayer::Tagcn(l) => l.bias,
    };
    if bias.len() != out_dim {
        return Err(PyValueError::new_err(format!(
            "bias length {}, expected {out_dim}",
            bias.len()
        )));
    }
    *store.get_mut(bias_id) = Tensor::new(vec![1, out_dim], bias).map_err(to_py)?;
    let ops = GraphOperators::new(adjacency.inner.clone()).map_err(to_py)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = layer
        .forward(&mut tape, &store, &Adjacency::Sparse(ops), xv)
        .map_err(to_py)?;
    Ok(tape.value(y).to_rows())
}

/// SortPool of one graph: rows ordered by the last channel (ties by earlier
/// channels, then index), truncated or zero-padded to `k`.
#[pyfunction]
fn sort_pool(x: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<f64>>> {
    let x = tensor(x)?;
    let n = x.rows();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = pool::sort_pool(&mut tape, &[xv], &vec![0; n], 1, k).map_err(to_py)?;
    Ok(tape.value(y).to_rows())
}

#[pymodule]
fn graphpool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySparseMatrix>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(topk_indices, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(conv_forward, m)?)?;
    m.add_function(wrap_pyfunction!(sort_pool, m)?)?;
    Ok(())
}
