//! TU graph-kernel benchmark ingestion.
//!
//! A dataset `DS` is a directory holding `DS_A.txt` (1-indexed node pairs),
//! `DS_graph_indicator.txt`, `DS_graph_labels.txt` and optionally
//! `DS_node_labels.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, SparseMatrix};

/// Reference properties of a benchmark: graph count, class count, average
/// nodes and average edges per graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableStats {
    pub graphs: usize,
    pub classes: usize,
    pub avg_nodes: f64,
    pub avg_edges: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetName {
    Mutag,
    Proteins,
    ImdbBinary,
    RedditBinary,
}

impl DatasetName {
    pub const ALL: [DatasetName; 4] = [
        DatasetName::Mutag,
        DatasetName::Proteins,
        DatasetName::ImdbBinary,
        DatasetName::RedditBinary,
    ];

    /// Upper-case file prefix used by the TU archive.
    pub fn prefix(self) -> &'static str {
        match self {
            DatasetName::Mutag => "MUTAG",
            DatasetName::Proteins => "PROTEINS",
            DatasetName::ImdbBinary => "IMDB-BINARY",
            DatasetName::RedditBinary => "REDDIT-BINARY",
        }
    }

    /// Lower-case name used on the command line and in result files.
    pub fn slug(self) -> &'static str {
        match self {
            DatasetName::Mutag => "mutag",
            DatasetName::Proteins => "proteins",
            DatasetName::ImdbBinary => "imdb-binary",
            DatasetName::RedditBinary => "reddit-binary",
        }
    }

    pub fn expected(self) -> TableStats {
        let (graphs, classes, avg_nodes, avg_edges) = match self {
            DatasetName::Mutag => (188, 2, 17.7, 38.9),
            DatasetName::Proteins => (1113, 2, 39.06, 72.82),
            DatasetName::ImdbBinary => (1000, 2, 19.77, 96.53),
            DatasetName::RedditBinary => (2000, 2, 429.63, 497.75),
        };
        TableStats {
            graphs,
            classes,
            avg_nodes,
            avg_edges,
        }
    }

    /// Degree cap for degree one-hot features, when the dataset has no node labels.
    pub fn degree_cap(self) -> Option<usize> {
        match self {
            DatasetName::RedditBinary => Some(64),
            _ => None,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|d| d.slug()).join(", ")
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|d| d.slug() == key)
            .ok_or_else(|| Error::Argument(format!("unknown dataset {s:?}; valid names: {}", Self::valid_names())))
    }
}

/// Where a dataset lives and what it should look like.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    /// File prefix, e.g. `MUTAG`.
    pub prefix: String,
    pub dir: PathBuf,
    /// Known benchmark, if any. Drives the degree cap and the expected stats.
    pub known: Option<DatasetName>,
    pub features: FeatureMode,
}

impl DatasetSpec {
    /// Finds `name` under `root`, trying the common archive layouts
    /// (`root/MUTAG`, `root/mutag`, `root/MUTAG/MUTAG`, `root/MUTAG/raw`).
    /// Falls back to `root/MUTAG` so that loading reports the missing file.
    pub fn locate(name: DatasetName, root: &Path) -> Self {
        let p = name.prefix();
        let candidates = [
            root.join(p),
            root.join(name.slug()),
            root.join(p).join(p),
            root.join(p).join("raw"),
            root.join(p).join(p).join("raw"),
            root.to_path_buf(),
        ];
        let dir = candidates
            .iter()
            .find(|d| d.join(format!("{p}_A.txt")).is_file())
            .cloned()
            .unwrap_or_else(|| root.join(p));
        Self {
            prefix: p.to_string(),
            dir,
            known: Some(name),
            features: FeatureMode::Auto,
        }
    }

    /// An arbitrary TU-format directory.
    pub fn custom(prefix: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            prefix: prefix.into(),
            dir: dir.into(),
            known: None,
            features: FeatureMode::Auto,
        }
    }

    pub fn with_features(mut self, features: FeatureMode) -> Self {
        self.features = features;
        self
    }

    pub fn file(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}_{suffix}.txt", self.prefix))
    }

    pub fn expected(&self) -> Option<TableStats> {
        self.known.map(DatasetName::expected)
    }
}

/// Feature synthesis policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMode {
    /// Node-label one-hot when labels exist, degree one-hot otherwise.
    #[default]
    Auto,
    /// Degree one-hot even when node labels exist.
    Degree,
    /// A single constant-1 channel.
    Constant,
}

/// How the node features of a dataset were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureProvenance {
    NodeLabels,
    Degree { cap: usize },
    Constant,
}

/// Input to [`make_node_features`] for one graph.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    /// Dense node labels in `[0, vocab)`.
    NodeLabels {
        labels: &'a [usize],
        vocab: usize,
    },
    /// One-hot degree, degrees above `cap` land in the last bucket.
    Degree {
        cap: usize,
    },
    Constant,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_width: usize,
    pub provenance: FeatureProvenance,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::num_nodes).max().unwrap_or(0)
    }

    pub fn mean_nodes(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / self.graphs.len() as f64
    }
}

/// Node features for one graph with adjacency `adj`.
pub fn make_node_features(adj: &SparseMatrix, source: FeatureSource<'_>) -> Tensor {
    let n = adj.n_rows();
    match source {
        FeatureSource::NodeLabels { labels, vocab } => {
            let mut t = Tensor::zeros(&[n, vocab]);
            for (i, &l) in labels.iter().enumerate().take(n) {
                t.values_mut()[i * vocab + l] = 1.0;
            }
            t
        }
        FeatureSource::Degree { cap } => {
            let width = cap + 1;
            let mut t = Tensor::zeros(&[n, width]);
            for i in 0..n {
                let d = adj.row_entries(i).count().min(cap);
                t.values_mut()[i * width + d] = 1.0;
            }
            t
        }
        FeatureSource::Constant => Tensor::filled(&[n, 1], 1.0),
    }
}

/// Whitespace- or comma-separated integers on one line.
fn parse_ints(line: &str) -> std::result::Result<Vec<i64>, std::num::ParseIntError> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn read_lines(path: &Path) -> Result<Vec<(usize, Vec<i64>)>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ints = parse_ints(line).map_err(|e| Error::Format {
            file: path.to_path_buf(),
            msg: format!("line {}: {e}", no + 1),
        })?;
        out.push((no + 1, ints));
    }
    Ok(out)
}

fn read_column(path: &Path) -> Result<Vec<i64>> {
    read_lines(path)?
        .into_iter()
        .map(|(no, ints)| match ints.as_slice() {
            [v] => Ok(*v),
            // some archives carry extra label columns; the first is the label
            [v, ..] => Ok(*v),
            [] => Err(Error::Format {
                file: path.to_path_buf(),
                msg: format!("line {no}: empty"),
            }),
        })
        .collect()
}

/// Maps raw values to `[0, k)` in ascending raw order.
fn dense_vocab(values: &[i64]) -> (Vec<usize>, usize) {
    let mut vocab: BTreeMap<i64, usize> = values.iter().map(|&v| (v, 0)).collect();
    for (i, slot) in vocab.values_mut().enumerate() {
        *slot = i;
    }
    (values.iter().map(|v| vocab[v]).collect(), vocab.len())
}

/// Loads a TU-format dataset.
pub fn load_tu_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let indicator_path = spec.file("graph_indicator");
    let edges_path = spec.file("A");
    let labels_path = spec.file("graph_labels");
    for p in [&edges_path, &indicator_path, &labels_path] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }

    let indicator = read_column(&indicator_path)?;
    let graph_labels = read_column(&labels_path)?;
    let num_graphs = graph_labels.len();
    let num_nodes = indicator.len();

    // local index of every node within its graph
    let mut graph_of = Vec::with_capacity(num_nodes);
    let mut local = Vec::with_capacity(num_nodes);
    let mut sizes = vec![0usize; num_graphs];
    for (i, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(Error::Format {
                file: indicator_path.clone(),
                msg: format!(
                    "node {} refers to graph {g}, but {num_graphs} graphs are labelled",
                    i + 1
                ),
            });
        }
        let g = g as usize - 1;
        graph_of.push(g);
        local.push(sizes[g]);
        sizes[g] += 1;
    }
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        log::warn!("graph {} of {} has no nodes", g + 1, spec.prefix);
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (no, ints) in read_lines(&edges_path)? {
        let &[u, v] = ints.as_slice() else {
            return Err(Error::Format {
                file: edges_path.clone(),
                msg: format!("line {no}: expected a node pair, found {} values", ints.len()),
            });
        };
        let mut ends = [0usize; 2];
        for (slot, raw) in ends.iter_mut().zip([u, v]) {
            if raw < 1 || raw as usize > num_nodes {
                return Err(Error::Format {
                    file: edges_path.clone(),
                    msg: format!("line {no}: node {raw} outside 1..={num_nodes}"),
                });
            }
            *slot = raw as usize - 1;
        }
        let (gu, gv) = (graph_of[ends[0]], graph_of[ends[1]]);
        if gu != gv {
            return Err(Error::Format {
                file: edges_path.clone(),
                msg: format!("line {no}: edge joins graph {} and graph {}", gu + 1, gv + 1),
            });
        }
        edges[gu].push((local[ends[0]], local[ends[1]]));
    }

    let node_labels_path = spec.file("node_labels");
    let node_labels = if node_labels_path.is_file() {
        let raw = read_column(&node_labels_path)?;
        if raw.len() != num_nodes {
            return Err(Error::Format {
                file: node_labels_path,
                msg: format!("{} labels for {num_nodes} nodes", raw.len()),
            });
        }
        Some(dense_vocab(&raw))
    } else {
        None
    };

    let adjacencies = edges
        .iter()
        .zip(&sizes)
        .map(|(e, &n)| SparseMatrix::from_undirected_edges(n, e))
        .collect::<Result<Vec<_>>>()?;

    let (labels, num_classes) = dense_vocab(&graph_labels);

    let provenance = match (spec.features, &node_labels) {
        (FeatureMode::Constant, _) => FeatureProvenance::Constant,
        (FeatureMode::Auto, Some(_)) => FeatureProvenance::NodeLabels,
        _ => {
            let max_degree = adjacencies
                .iter()
                .flat_map(|a| (0..a.n_rows()).map(move |i| a.row_entries(i).count()))
                .max()
                .unwrap_or(0);
            let cap = spec
                .known
                .and_then(DatasetName::degree_cap)
                .map_or(max_degree, |c| c.min(max_degree));
            FeatureProvenance::Degree { cap }
        }
    };

    // per-graph node label slices, in local order
    let mut per_graph_labels: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    if let Some((dense, _)) = &node_labels {
        for (i, &l) in dense.iter().enumerate() {
            per_graph_labels[graph_of[i]].push(l);
        }
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, adj) in adjacencies.into_iter().enumerate() {
        let source = match provenance {
            FeatureProvenance::NodeLabels => FeatureSource::NodeLabels {
                labels: &per_graph_labels[g],
                vocab: node_labels.as_ref().map_or(0, |(_, k)| *k),
            },
            FeatureProvenance::Degree { cap } => FeatureSource::Degree { cap },
            FeatureProvenance::Constant => FeatureSource::Constant,
        };
        let features = make_node_features(&adj, source);
        graphs.push(Graph::new(g, adj, features, labels[g])?);
    }
    let feature_width = match provenance {
        FeatureProvenance::NodeLabels => node_labels.as_ref().map_or(0, |(_, k)| *k),
        FeatureProvenance::Degree { cap } => cap + 1,
        FeatureProvenance::Constant => 1,
    };

    Ok(Dataset {
        name: spec.prefix.clone(),
        graphs,
        num_classes,
        feature_width,
        provenance,
    })
}

/// Measured dataset properties under both edge-counting conventions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub graphs: usize,
    pub classes: usize,
    pub avg_nodes: f64,
    /// Average number of undirected edges `{u, v}`.
    pub avg_edges_undirected: f64,
    /// Average number of stored adjacency entries (each edge twice).
    pub avg_edges_directed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeConvention {
    Undirected,
    Directed,
}

/// Result of comparing measured stats to the reference ones.
#[derive(Clone, Debug)]
pub struct StatsComparison {
    pub graphs_match: bool,
    pub classes_match: bool,
    pub nodes_rel_error: f64,
    pub undirected_rel_error: f64,
    pub directed_rel_error: f64,
    /// Best-matching edge convention, if either lies within tolerance.
    pub convention: Option<EdgeConvention>,
    pub tolerance: f64,
}

impl StatsComparison {
    pub fn passed(&self) -> bool {
        self.graphs_match && self.classes_match && self.nodes_rel_error <= self.tolerance && self.convention.is_some()
    }
}

pub fn compute_dataset_stats(d: &Dataset) -> Result<DatasetStats> {
    if d.graphs.is_empty() {
        return Err(Error::Argument("stats of an empty dataset".into()));
    }
    let count = d.graphs.len() as f64;
    let nodes: usize = d.graphs.iter().map(Graph::num_nodes).sum();
    let und: usize = d.graphs.iter().map(Graph::num_undirected_edges).sum();
    let dir: usize = d.graphs.iter().map(|g| g.adjacency.nnz()).sum();
    Ok(DatasetStats {
        graphs: d.graphs.len(),
        classes: d.num_classes,
        avg_nodes: nodes as f64 / count,
        avg_edges_undirected: und as f64 / count,
        avg_edges_directed: dir as f64 / count,
    })
}

fn rel(measured: f64, expected: f64) -> f64 {
    (measured - expected).abs() / expected.abs().max(f64::MIN_POSITIVE)
}

pub fn compare_stats(measured: &DatasetStats, expected: &TableStats, tolerance: f64) -> StatsComparison {
    let undirected_rel_error = rel(measured.avg_edges_undirected, expected.avg_edges);
    let directed_rel_error = rel(measured.avg_edges_directed, expected.avg_edges);
    let convention = [
        (undirected_rel_error, EdgeConvention::Undirected),
        (directed_rel_error, EdgeConvention::Directed),
    ]
    .into_iter()
    .filter(|(e, _)| *e <= tolerance)
    .min_by(|a, b| a.0.total_cmp(&b.0))
    .map(|(_, c)| c);
    StatsComparison {
        graphs_match: measured.graphs == expected.graphs,
        classes_match: measured.classes == expected.classes,
        nodes_rel_error: rel(measured.avg_nodes, expected.avg_nodes),
        undirected_rel_error,
        directed_rel_error,
        convention,
        tolerance,
    }
}

/// A graph in raw TU terms, for writing fixtures.
#[derive(Clone, Debug)]
pub struct RawGraph {
    pub num_nodes: usize,
    /// 0-indexed local pairs; written once per direction.
    pub edges: Vec<(usize, usize)>,
    pub label: i64,
    pub node_labels: Option<Vec<i64>>,
}

/// Writes `graphs` as a TU dataset named `prefix` into `dir`.
pub fn write_tu_dataset(dir: &Path, prefix: &str, graphs: &[RawGraph]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let open = |suffix: &str| -> Result<std::io::BufWriter<fs::File>> {
        Ok(std::io::BufWriter::new(fs::File::create(
            dir.join(format!("{prefix}_{suffix}.txt")),
        )?))
    };
    let mut a = open("A")?;
    let mut ind = open("graph_indicator")?;
    let mut gl = open("graph_labels")?;
    let with_labels = graphs.iter().all(|g| g.node_labels.is_some()) && !graphs.is_empty();
    let mut nl = if with_labels { Some(open("node_labels")?) } else { None };
    let mut offset = 0;
    for (g, raw) in graphs.iter().enumerate() {
        for _ in 0..raw.num_nodes {
            writeln!(ind, "{}", g + 1)?;
        }
        for &(u, v) in &raw.edges {
            writeln!(a, "{}, {}", offset + u + 1, offset + v + 1)?;
            writeln!(a, "{}, {}", offset + v + 1, offset + u + 1)?;
        }
        writeln!(gl, "{}", raw.label)?;
        if let (Some(w), Some(labels)) = (nl.as_mut(), &raw.node_labels) {
            for l in labels {
                writeln!(w, "{l}")?;
            }
        }
        offset += raw.num_nodes;
    }
    a.flush()?;
    ind.flush()?;
    gl.flush()?;
    if let Some(mut w) = nl {
        w.flush()?;
    }
    Ok(())
}

/// A two-class toy benchmark in raw form: class 0 graphs are rings, class 1
/// graphs are rings with a pendant star hub; sizes and extra chords vary.
/// Node labels mark hubs, which makes the classes learnable but not trivial.
pub fn synthetic_benchmark(num_graphs: usize, seed: u64) -> Vec<RawGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_graphs);
    for i in 0..num_graphs {
        let class = i % 2;
        let n_ring = rng.gen_range(6..14);
        let mut edges: Vec<(usize, usize)> = (0..n_ring).map(|j| (j, (j + 1) % n_ring)).collect();
        let mut node_labels = vec![0i64; n_ring];
        for _ in 0..rng.gen_range(0..3) {
            let u = rng.gen_range(0..n_ring);
            let v = rng.gen_range(0..n_ring);
            if u != v {
                edges.push((u, v));
            }
        }
        let mut n = n_ring;
        if class == 1 {
            let hub = n;
            node_labels.push(1);
            edges.push((hub, rng.gen_range(0..n_ring)));
            let leaves = rng.gen_range(2..5);
            for l in 0..leaves {
                edges.push((hub, hub + 1 + l));
                node_labels.push(2);
            }
            n += 1 + leaves;
        } else {
            // a pendant path of similar size keeps node counts overlapping
            let len = rng.gen_range(2..6);
            edges.push((rng.gen_range(0..n_ring), n));
            for l in 0..len {
                if l + 1 < len {
                    edges.push((n + l, n + l + 1));
                }
                node_labels.push(2);
            }
            n += len;
        }
        edges.sort_unstable();
        edges.dedup();
        out.push(RawGraph {
            num_nodes: n,
            edges,
            label: if class == 1 { 1 } else { -1 },
            node_labels: Some(node_labels),
        });
    }
    out.shuffle(&mut rng);
    out
}
