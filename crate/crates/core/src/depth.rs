//! Layer-aggregated dependency matrices and the Dependency Depth Bias.
//!
//! Rows and columns are indexed `I, 1, …, L, O` (index 0, 1..=L, L+1).
//! Attention heads and the MLP of block `l` both map to index `l`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::discovery::{self, CircuitWeights, Method};
use crate::error::{Error, Result};
use crate::graph::{build_graph, compute_mean_cache, CompGraph, NodeId};
use crate::nn::ViTModel;

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMatrix {
    pub n_layers: usize,
    /// `(L+2)²` entries, row-major, source by target.
    pub entries: Vec<f64>,
    pub model_id: String,
    pub dataset_id: String,
}

impl DependencyMatrix {
    pub fn zeros(n_layers: usize) -> Self {
        let n = n_layers + 2;
        Self {
            n_layers,
            entries: vec![0.0; n * n],
            model_id: String::new(),
            dataset_id: String::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n_layers + 2
    }

    pub fn get(&self, src: usize, dst: usize) -> f64 {
        self.entries[src * self.dim() + dst]
    }

    pub fn set(&mut self, src: usize, dst: usize, v: f64) {
        let n = self.dim();
        self.entries[src * n + dst] = v;
    }

    pub fn add(&mut self, src: usize, dst: usize, v: f64) {
        let n = self.dim();
        self.entries[src * n + dst] += v;
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }

    /// CSV with header `src,I,1,…,L,O` and one labelled row per source.
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.entries, self.n_layers)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (n_layers, entries) = parse_matrix_csv(text)?;
        Ok(Self {
            n_layers,
            entries,
            model_id: String::new(),
            dataset_id: String::new(),
        })
    }
}

/// Layer labels `I, 1, …, L, O`.
pub fn layer_labels(n_layers: usize) -> Vec<String> {
    std::iter::once("I".to_string())
        .chain((1..=n_layers).map(|l| l.to_string()))
        .chain(std::iter::once("O".to_string()))
        .collect()
}

pub(crate) fn matrix_csv(entries: &[f64], n_layers: usize) -> String {
    let labels = layer_labels(n_layers);
    let n = labels.len();
    let mut out = format!("src,{}\n", labels.join(","));
    for (r, label) in labels.iter().enumerate() {
        out.push_str(label);
        for v in &entries[r * n..(r + 1) * n] {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub(crate) fn parse_matrix_csv(text: &str) -> Result<(usize, Vec<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty matrix file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "src" {
        return Err(Error::Format("matrix header must start with `src`".into()));
    }
    let n_layers = cols.len() - 3;
    if cols[1..] != layer_labels(n_layers).iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(Error::Format("matrix labels must be I,1,…,L,O".into()));
    }
    let n = n_layers + 2;
    let mut entries = Vec::with_capacity(n * n);
    for (r, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if r >= n || fields.len() != n + 1 {
            return Err(Error::Format(format!("malformed matrix row {}", r + 1)));
        }
        for f in &fields[1..] {
            entries.push(f.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad number {f:?}: {e}")))?);
        }
    }
    if entries.len() != n * n {
        return Err(Error::Format("matrix has missing rows".into()));
    }
    Ok((n_layers, entries))
}

/// Matrix index of a node: `I` → 0, block `l` → `l`, `O` → `L+1`.
pub fn layer_of(node: NodeId, n_layers: usize) -> usize {
    match node {
        NodeId::Input => 0,
        NodeId::AttnHead { layer, .. } | NodeId::Mlp { layer } => layer,
        NodeId::Output => n_layers + 1,
    }
}

/// Sums every edge weight into the cell of its (source layer, target layer).
pub fn aggregate_idm(c: &CircuitWeights, graph: &CompGraph) -> Result<DependencyMatrix> {
    c.check_graph(graph)?;
    let l = graph.layout.n_layers;
    let mut m = DependencyMatrix::zeros(l);
    for (e, &w) in graph.edges.iter().zip(&c.weights) {
        m.add(layer_of(e.src, l), layer_of(e.dst, l), w);
    }
    m.model_id = c.model_id.clone();
    m.dataset_id = c.dataset_id.clone();
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DdbKind {
    Global,
    Deep,
    Out,
}

impl DdbKind {
    pub fn default_tau(self) -> f64 {
        match self {
            DdbKind::Global => 0.1,
            DdbKind::Deep | DdbKind::Out => 0.3,
        }
    }
}

impl fmt::Display for DdbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DdbKind::Global => "global",
            DdbKind::Deep => "deep",
            DdbKind::Out => "out",
        })
    }
}

impl FromStr for DdbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(DdbKind::Global),
            "deep" => Ok(DdbKind::Deep),
            "out" => Ok(DdbKind::Out),
            _ => Err(Error::arg(format!("unknown DDB variant {s:?} (expected global, deep or out)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdbVariant {
    pub kind: DdbKind,
    pub tau: f64,
}

impl DdbVariant {
    pub fn new(kind: DdbKind, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { kind, tau })
    }

    pub fn with_default_tau(kind: DdbKind) -> Self {
        Self {
            kind,
            tau: kind.default_tau(),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 0.5) {
        return Err(Error::arg(format!("tau must lie in (0, 0.5], got {tau}")));
    }
    Ok(())
}

/// Shallow and deep layer sets as matrix indices.
/// `k = max(1, ⌊τL⌋)`; low = `1..=k`, high = `L−k+1..=L` plus `O`.
pub fn layer_sets(tau: f64, n_layers: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    check_tau(tau)?;
    if n_layers == 0 {
        return Err(Error::arg("model has no blocks"));
    }
    let k = ((tau * n_layers as f64).floor() as usize).max(1);
    let low = (1..=k).collect();
    let high = (n_layers - k + 1..=n_layers + 1).collect();
    Ok((low, high))
}

/// `ln(Σ_{i∈high, j∈J} Λ_ij / Σ_{i∈low, j∈J} Λ_ij)` over nonzero cells.
pub fn ddb(idm: &DependencyMatrix, variant: DdbVariant) -> Result<f64> {
    let l = idm.n_layers;
    let (low, high) = layer_sets(variant.tau, l)?;
    let targets: Vec<usize> = match variant.kind {
        DdbKind::Global => (1..=l).collect(),
        DdbKind::Deep => high.clone(),
        DdbKind::Out => vec![l + 1],
    };
    let mass = |sources: &[usize]| -> f64 {
        let mut s = 0.0;
        for &i in sources {
            for &j in &targets {
                let v = idm.get(i, j);
                if v != 0.0 {
                    s += v;
                }
            }
        }
        s
    };
    let (hi, lo) = (mass(&high), mass(&low));
    if !(hi > 0.0 && lo > 0.0) {
        return Err(Error::degenerate(format!(
            "DDB_{} needs positive deep and shallow mass (got {hi} and {lo})",
            variant.kind
        )));
    }
    Ok((hi / lo).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub ddb: f64,
    pub ood_perf: Option<f64>,
}

/// DDB of each snapshot, computed from circuits on `data` with means taken
/// over the same data.
pub fn ddb_training_series(
    snapshots: &[(usize, ViTModel)],
    data: &Dataset,
    method: Method,
    variant: DdbVariant,
    ood_labels: Option<&Dataset>,
) -> Result<Vec<SeriesPoint>> {
    if snapshots.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::arg("snapshots must be ordered by training step"));
    }
    let mut out = Vec::with_capacity(snapshots.len());
    for (step, model) in snapshots {
        let value = model_ddb(model, data, method, variant)?;
        let ood_perf = ood_labels.map(|d| crate::nn::evaluate_accuracy(model, d)).transpose()?;
        out.push(SeriesPoint {
            step: *step,
            ddb: value,
            ood_perf,
        });
    }
    Ok(out)
}

/// Circuit → IDM → DDB for one model.
pub fn model_ddb(model: &ViTModel, data: &Dataset, method: Method, variant: DdbVariant) -> Result<f64> {
    let graph = build_graph(&model.config);
    let cache = compute_mean_cache(model, data)?;
    let c = discovery::discover(model, data, &graph, &cache, method)?;
    ddb(&aggregate_idm(&c, &graph)?, variant)
}
