//! Circuit Shift Score: distances between the circuit of a model on its
//! reference data and on a new domain. Every distance is oriented so that
//! 0 means identical circuits.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::depth::{layer_of, DependencyMatrix};
use crate::discovery::{top_k_indices, CircuitWeights};
use crate::error::{Error, Result};
use crate::graph::CompGraph;
use crate::stats::{average_ranks, spearman};

pub const DEFAULT_TOP_K: usize = 100;
pub const NETLSD_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Repr {
    Vector,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cosine,
    L2,
    Srcc,
    Laplacian,
    Netlsd,
    Jaccard,
}

impl Distance {
    pub const ALL: [Distance; 6] = [
        Distance::Cosine,
        Distance::L2,
        Distance::Srcc,
        Distance::Laplacian,
        Distance::Netlsd,
        Distance::Jaccard,
    ];

    pub fn repr(self) -> Repr {
        match self {
            Distance::Cosine | Distance::L2 | Distance::Srcc => Repr::Vector,
            _ => Repr::Graph,
        }
    }

    /// Whether the distance looks at a top-k pruned graph.
    pub fn uses_k(self) -> bool {
        matches!(self, Distance::Netlsd | Distance::Jaccard)
    }
}

impl fmt::Display for Repr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Repr::Vector => "vector",
            Repr::Graph => "graph",
        })
    }
}

impl FromStr for Repr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Repr::Vector),
            "graph" => Ok(Repr::Graph),
            _ => Err(Error::arg(format!("unknown representation {s:?}"))),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Cosine => "cosine",
            Distance::L2 => "l2",
            Distance::Srcc => "srcc",
            Distance::Laplacian => "laplacian",
            Distance::Netlsd => "netlsd",
            Distance::Jaccard => "jaccard",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distance::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::arg(format!("unknown distance {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CssValue {
    pub value: f64,
    pub repr: Repr,
    pub distance: Distance,
    pub k: Option<usize>,
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("vectors differ in length ({} vs {})", a.len(), b.len())));
    }
    Ok(())
}

/// `1 − a·b / (‖a‖‖b‖)`, in `[0, 2]`.
pub fn d_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine distance of a zero vector"));
    }
    if a == b {
        return Ok(0.0);
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(1.0 - cos.clamp(-1.0, 1.0))
}

pub fn d_l2(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `1 − SRCC(a, b)`, in `[0, 2]`.
pub fn d_srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    if a == b {
        if a.len() < 2 {
            return Err(Error::arg("rank distance needs at least two entries"));
        }
        if a.iter().all(|&v| v == a[0]) {
            return Err(Error::degenerate("rank distance of a constant vector"));
        }
        return Ok(0.0);
    }
    Ok(1.0 - spearman(a, b)?)
}

/// Undirected weighted graph on a fixed vertex set, as a dense symmetric
/// weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    pub n: usize,
    pub weights: Vec<f64>,
}

impl WeightedGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            weights: vec![0.0; n * n],
        }
    }

    /// Adds `w` to the undirected edge `{u, v}`.
    pub fn add_edge(&mut self, u: usize, v: usize, w: f64) {
        self.weights[u * self.n + v] += w;
        if u != v {
            self.weights[v * self.n + u] += w;
        }
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                (0..n).filter(|&k| k != i).map(|k| self.weights[i * n + k]).sum()
            } else {
                -self.weights[i * n + j]
            }
        })
    }

    /// Laplacian eigenvalues, ascending.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        let l = self.laplacian();
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite graph weight".into()));
        }
        let eig = SymmetricEigen::try_new(l, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Numeric("eigensolver did not converge".into()))?;
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }
}

/// The full circuit as an undirected graph with `|w|` edge weights.
pub fn circuit_graph(c: &CircuitWeights, graph: &CompGraph) -> Result<WeightedGraph> {
    c.check_graph(graph)?;
    let mut g = WeightedGraph::empty(graph.n_nodes());
    for (&(u, v), w) in graph.edge_nodes.iter().zip(&c.weights) {
        g.add_edge(u, v, w.abs());
    }
    Ok(g)
}

/// The `k` heaviest edges of a circuit, keeping their original weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedGraph {
    pub n_nodes: usize,
    pub k: usize,
    /// Canonical edge indices, ascending.
    pub edges: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn prune(c: &CircuitWeights, graph: &CompGraph, k: usize) -> Result<PrunedGraph> {
    c.check_graph(graph)?;
    let edges = top_k_indices(c, k)?;
    Ok(PrunedGraph {
        n_nodes: graph.n_nodes(),
        k,
        weights: edges.iter().map(|&e| c.weights[e]).collect(),
        edges,
    })
}

impl PrunedGraph {
    pub fn to_weighted(&self, graph: &CompGraph) -> WeightedGraph {
        let mut g = WeightedGraph::empty(self.n_nodes);
        for (&e, w) in self.edges.iter().zip(&self.weights) {
            let (u, v) = graph.edge_nodes[e];
            g.add_edge(u, v, w.abs());
        }
        g
    }
}

pub fn d_laplacian(g1: &WeightedGraph, g2: &WeightedGraph) -> Result<f64> {
    if g1.n != g2.n {
        return Err(Error::arg("graphs have different vertex sets"));
    }
    if g1 == g2 {
        return Ok(0.0);
    }
    d_l2(&g1.spectrum()?, &g2.spectrum()?)
}

/// 64 log-spaced points in `[1e-2, 1e2]`.
pub fn default_t_grid() -> Vec<f64> {
    (0..NETLSD_POINTS)
        .map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / (NETLSD_POINTS - 1) as f64))
        .collect()
}

/// Heat trace `h(t) = Σ_i exp(−t λ_i)`.
pub fn heat_trace(spectrum: &[f64], t_grid: &[f64]) -> Vec<f64> {
    t_grid
        .iter()
        .map(|&t| spectrum.iter().map(|&l| (-t * l).exp()).sum())
        .collect()
}

pub fn d_netlsd(g1: &WeightedGraph, g2: &WeightedGraph, t_grid: &[f64]) -> Result<f64> {
    if g1.n != g2.n {
        return Err(Error::arg("graphs have different vertex sets"));
    }
    if g1 == g2 {
        return Ok(0.0);
    }
    d_l2(&heat_trace(&g1.spectrum()?, t_grid), &heat_trace(&g2.spectrum()?, t_grid))
}

/// `1 − |A ∩ B| / |A ∪ B|`; two empty sets are at distance 0.
pub fn d_jaccard(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(&b).count() as f64 / union as f64
}

/// Circuit Shift Score between a reference and a test circuit of the same
/// model. `k` is clamped to `|E|` for the pruned-graph distances.
pub fn css(
    reference: &CircuitWeights,
    test: &CircuitWeights,
    graph: &CompGraph,
    distance: Distance,
    k: usize,
) -> Result<CssValue> {
    if reference.model_id != test.model_id {
        return Err(Error::arg(format!(
            "circuits come from different models ({} vs {})",
            reference.model_id, test.model_id
        )));
    }
    reference.check_graph(graph)?;
    test.check_graph(graph)?;
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let k = k.min(graph.n_edges());
    let (a, b) = (&reference.weights, &test.weights);
    let value = match distance {
        Distance::Cosine => d_cosine(a, b)?,
        Distance::L2 => d_l2(a, b)?,
        Distance::Srcc => d_srcc(a, b)?,
        Distance::Laplacian => d_laplacian(&circuit_graph(reference, graph)?, &circuit_graph(test, graph)?)?,
        Distance::Netlsd => d_netlsd(
            &prune(reference, graph, k)?.to_weighted(graph),
            &prune(test, graph, k)?.to_weighted(graph),
            &default_t_grid(),
        )?,
        Distance::Jaccard => d_jaccard(&prune(reference, graph, k)?.edges, &prune(test, graph, k)?.edges),
    };
    Ok(CssValue {
        value,
        repr: distance.repr(),
        distance,
        k: distance.uses_k().then_some(k),
    })
}

/// Mean absolute change in edge rank per (source layer, target layer) cell.
/// Ranks are over `|w|`, largest first, with average ranks for ties.
pub fn rank_change_heatmap(
    reference: &CircuitWeights,
    test: &CircuitWeights,
    graph: &CompGraph,
) -> Result<DependencyMatrix> {
    reference.check_graph(graph)?;
    test.check_graph(graph)?;
    let desc = |w: &[f64]| average_ranks(&w.iter().map(|v| -v.abs()).collect::<Vec<_>>());
    let (ra, rb) = (desc(&reference.weights), desc(&test.weights));
    let l = graph.layout.n_layers;
    let mut sum = DependencyMatrix::zeros(l);
    let mut count = DependencyMatrix::zeros(l);
    for (i, e) in graph.edges.iter().enumerate() {
        let (s, t) = (layer_of(e.src, l), layer_of(e.dst, l));
        sum.add(s, t, (ra[i] - rb[i]).abs());
        count.add(s, t, 1.0);
    }
    for (v, c) in sum.entries.iter_mut().zip(&count.entries) {
        if *c > 0.0 {
            *v /= c;
        }
    }
    sum.model_id = reference.model_id.clone();
    sum.dataset_id = format!("{}~{}", reference.dataset_id, test.dataset_id);
    Ok(sum)
}

/// One row of a domain snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub domain_id: String,
    pub repr: Repr,
    pub distance: Distance,
    pub k: Option<usize>,
    pub css: f64,
    pub perf_if_known: Option<f64>,
}

pub const SNAPSHOT_HEADER: &str = "domain_id,repr,distance,k,css,perf_if_known";

impl SnapshotRow {
    pub fn new(domain_id: impl Into<String>, v: &CssValue, perf: Option<f64>) -> Self {
        Self {
            domain_id: domain_id.into(),
            repr: v.repr,
            distance: v.distance,
            k: v.k,
            css: v.value,
            perf_if_known: perf,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let opt = |o: Option<String>| o.unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.domain_id,
            self.repr,
            self.distance,
            opt(self.k.map(|k| k.to_string())),
            self.css,
            opt(self.perf_if_known.map(|p| p.to_string()))
        )
    }
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_snapshot(path: &Path, rows: &[SnapshotRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{SNAPSHOT_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.to_csv_line())?;
    }
    Ok(())
}
