//! Head/MLP-granularity computational graph over the residual stream and
//! edge-level mean ablation.
//!
//! Nodes are the input embedding, every attention head, every MLP block and
//! the classifier readout. A node reads the sum of the outputs of all nodes
//! that precede it in stream order; each such (writer, reader) pair is an
//! edge. Heads of one layer run in parallel and are not connected to each
//! other.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Intervention, ModelConfig, ViTModel};
use crate::par;
use crate::tensor::Tensor;

/// A node of the computational graph. Layers and heads are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Input,
    AttnHead { layer: usize, head: usize },
    Mlp { layer: usize },
    Output,
}

impl NodeId {
    /// Position in the residual stream; heads of one layer share a level.
    pub fn level(&self, n_layers: usize) -> usize {
        match *self {
            NodeId::Input => 0,
            NodeId::AttnHead { layer, .. } => 2 * layer - 1,
            NodeId::Mlp { layer } => 2 * layer,
            NodeId::Output => 2 * n_layers + 1,
        }
    }

    /// Block index used by the layer-aggregated views: `None` for input and
    /// output, `Some(l)` for anything inside block `l`.
    pub fn block(&self) -> Option<usize> {
        match *self {
            NodeId::AttnHead { layer, .. } | NodeId::Mlp { layer } => Some(layer),
            NodeId::Input | NodeId::Output => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Input => write!(f, "I"),
            NodeId::AttnHead { layer, head } => write!(f, "A{layer}.{head}"),
            NodeId::Mlp { layer } => write!(f, "M{layer}"),
            NodeId::Output => write!(f, "O"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unrecognised node name {s:?}"));
        match s {
            "I" => Ok(NodeId::Input),
            "O" => Ok(NodeId::Output),
            _ if s.starts_with('A') => {
                let (l, h) = s[1..].split_once('.').ok_or_else(bad)?;
                Ok(NodeId::AttnHead {
                    layer: l.parse().map_err(|_| bad())?,
                    head: h.parse().map_err(|_| bad())?,
                })
            }
            _ if s.starts_with('M') => Ok(NodeId::Mlp {
                layer: s[1..].parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Dense node numbering: `I, A(1,1..H), M1, A(2,1..H), M2, …, O`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeLayout {
    pub n_layers: usize,
    pub n_heads: usize,
}

impl NodeLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
        }
    }

    pub fn count(&self) -> usize {
        2 + self.n_layers * (self.n_heads + 1)
    }

    pub fn output(&self) -> usize {
        self.count() - 1
    }

    pub fn head(&self, layer: usize, head: usize) -> usize {
        1 + (layer - 1) * (self.n_heads + 1) + (head - 1)
    }

    pub fn mlp(&self, layer: usize) -> usize {
        1 + (layer - 1) * (self.n_heads + 1) + self.n_heads
    }

    pub fn index(&self, node: NodeId) -> Option<usize> {
        let in_range = |l: usize| l >= 1 && l <= self.n_layers;
        match node {
            NodeId::Input => Some(0),
            NodeId::Output => Some(self.output()),
            NodeId::AttnHead { layer, head } if in_range(layer) && head >= 1 && head <= self.n_heads => {
                Some(self.head(layer, head))
            }
            NodeId::Mlp { layer } if in_range(layer) => Some(self.mlp(layer)),
            _ => None,
        }
    }

    pub fn node(&self, idx: usize) -> NodeId {
        if idx == 0 {
            return NodeId::Input;
        }
        if idx == self.output() {
            return NodeId::Output;
        }
        let k = idx - 1;
        let layer = k / (self.n_heads + 1) + 1;
        let pos = k % (self.n_heads + 1);
        if pos == self.n_heads {
            NodeId::Mlp { layer }
        } else {
            NodeId::AttnHead { layer, head: pos + 1 }
        }
    }

    pub fn level(&self, idx: usize) -> usize {
        self.node(idx).level(self.n_layers)
    }

    /// Whether node `src` writes into the stream that node `dst` reads.
    pub fn connected(&self, src: usize, dst: usize) -> bool {
        self.level(src) < self.level(dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

/// The graph `G = (V, E)` of a model configuration.
#[derive(Debug, Clone)]
pub struct CompGraph {
    pub config: ModelConfig,
    pub layout: NodeLayout,
    pub nodes: Vec<NodeId>,
    pub edges: Vec<Edge>,
    /// `(src index, dst index)` for every edge, parallel to `edges`.
    pub edge_nodes: Vec<(usize, usize)>,
    lookup: HashMap<(usize, usize), usize>,
}

/// Builds the graph with canonical node and edge ordering. Edges are sorted
/// by (source index, destination index), which orders by stream position
/// first and head index second.
pub fn build_graph(cfg: &ModelConfig) -> CompGraph {
    let layout = NodeLayout::new(cfg);
    let n = layout.count();
    let nodes: Vec<NodeId> = (0..n).map(|i| layout.node(i)).collect();
    let mut edges = Vec::new();
    let mut edge_nodes = Vec::new();
    let mut lookup = HashMap::new();
    for s in 0..n {
        for d in 0..n {
            if layout.connected(s, d) {
                lookup.insert((s, d), edges.len());
                edges.push(Edge {
                    src: nodes[s],
                    dst: nodes[d],
                });
                edge_nodes.push((s, d));
            }
        }
    }
    CompGraph {
        config: cfg.clone(),
        layout,
        nodes,
        edges,
        edge_nodes,
        lookup,
    }
}

impl CompGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_index(&self, edge: &Edge) -> Option<usize> {
        let s = self.layout.index(edge.src)?;
        let d = self.layout.index(edge.dst)?;
        self.lookup.get(&(s, d)).copied()
    }

    /// Mask with the given edges (by index) ablated.
    pub fn mask_from_indices(&self, indices: impl IntoIterator<Item = usize>) -> EdgeMask {
        let mut m = EdgeMask::empty(self.n_nodes());
        for i in indices {
            let (s, d) = self.edge_nodes[i];
            m.set(s, d);
        }
        m
    }

    pub fn mask_from_edges<'a>(&self, edges: impl IntoIterator<Item = &'a Edge>) -> Result<EdgeMask> {
        let mut idx = Vec::new();
        for e in edges {
            idx.push(
                self.edge_index(e)
                    .ok_or_else(|| Error::arg(format!("edge {e} is not in the graph")))?,
            );
        }
        Ok(self.mask_from_indices(idx))
    }

    /// Closed-form edge count, used to cross-check enumeration.
    pub fn expected_edge_count(n_layers: usize, n_heads: usize) -> usize {
        let (l, h) = (n_layers, n_heads);
        let heads: usize = (1..=l).map(|k| h * (1 + (k - 1) * (h + 1))).sum();
        let mlps: usize = (1..=l).map(|k| 1 + (k - 1) * (h + 1) + h).sum();
        heads + mlps + 1 + l * (h + 1)
    }
}

/// Dense `(src, dst)` bitmap of ablated edges, indexed by node numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    n: usize,
    bits: Vec<bool>,
    any: bool,
}

impl EdgeMask {
    pub fn empty(n_nodes: usize) -> Self {
        Self {
            n: n_nodes,
            bits: vec![false; n_nodes * n_nodes],
            any: false,
        }
    }

    pub fn set(&mut self, src: usize, dst: usize) {
        self.bits[src * self.n + dst] = true;
        self.any = true;
    }

    #[inline]
    pub fn contains(&self, src: usize, dst: usize) -> bool {
        self.any && self.bits[src * self.n + dst]
    }

    pub fn is_empty(&self) -> bool {
        !self.any
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }
}

/// Per-node output means over a dataset, resolved per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCache {
    pub dataset_id: String,
    /// Indexed by node number; `[tokens × d_model]` values. The output node's
    /// entry is empty.
    pub means: Vec<Vec<f64>>,
}

/// Averages every node's output over all samples of `data`.
pub fn compute_mean_cache(model: &ViTModel, data: &Dataset) -> Result<MeanCache> {
    if data.is_empty() {
        return Err(Error::arg("mean cache needs a non-empty dataset"));
    }
    let layout = NodeLayout::new(&model.config);
    let clean = Intervention::none(layout.count());
    let outs: Vec<Vec<Vec<f64>>> = par::map_range(data.len(), |i| {
        let x = data.image_f64(i);
        nn::forward_sample(model, &x, &clean).map(|f| f.node_outputs())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n_nodes = layout.count();
    let width = model.config.tokens() * model.config.d_model;
    let mut means = vec![vec![0.0; width]; n_nodes];
    means[layout.output()].clear();
    for sample in &outs {
        for (node, acc) in means.iter_mut().enumerate().take(n_nodes - 1) {
            crate::tensor::add_assign(acc, &sample[node]);
        }
    }
    let inv = data.len() as f64;
    for m in means.iter_mut() {
        m.iter_mut().for_each(|v| *v /= inv);
    }
    Ok(MeanCache {
        dataset_id: data.id.clone(),
        means,
    })
}

/// Logits `[n, n_classes]` with every edge in `ablate` mean-ablated.
pub fn forward_ablated(
    model: &ViTModel,
    batch: &Tensor,
    graph: &CompGraph,
    ablate: &[Edge],
    cache: &MeanCache,
) -> Result<Tensor> {
    let mask = graph.mask_from_edges(ablate)?;
    forward_masked(model, batch, &mask, cache)
}

/// As [`forward_ablated`] with a prebuilt mask.
pub fn forward_masked(
    model: &ViTModel,
    batch: &Tensor,
    mask: &EdgeMask,
    cache: &MeanCache,
) -> Result<Tensor> {
    check_cache(model, cache)?;
    let iv = Intervention {
        ablated: mask.clone(),
        means: Some(cache),
        alpha: 0.0,
    };
    nn::forward_with(model, batch, &iv).map(|(logits, _)| logits)
}

pub(crate) fn check_cache(model: &ViTModel, cache: &MeanCache) -> Result<()> {
    let layout = NodeLayout::new(&model.config);
    let width = model.config.tokens() * model.config.d_model;
    if cache.means.len() != layout.count()
        || cache.means[..layout.output()].iter().any(|m| m.len() != width)
    {
        return Err(Error::arg("mean cache does not match the model configuration"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(l: usize, h: usize) -> ModelConfig {
        ModelConfig {
            n_layers: l,
            n_heads: h,
            d_model: 4 * h,
            d_head: 4,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn single_block_graph_has_six_edges() {
        let g = build_graph(&cfg(1, 1));
        let names: Vec<String> = g.edges.iter().map(|e| e.to_string()).collect();
        assert_eq!(g.n_nodes(), 4);
        assert_eq!(
            names,
            ["I->A1.1", "I->M1", "I->O", "A1.1->M1", "A1.1->O", "M1->O"]
        );
    }

    #[test]
    fn desk_graph_has_87_edges() {
        let g = build_graph(&cfg(4, 2));
        assert_eq!(g.n_nodes(), 14);
        assert_eq!(g.n_edges(), 87);
    }

    #[test]
    fn edge_count_formula_matches_enumeration() {
        for l in 1..=4 {
            for h in 1..=4 {
                let g = build_graph(&cfg(l, h));
                assert_eq!(g.n_edges(), CompGraph::expected_edge_count(l, h), "L={l} H={h}");
                assert_eq!(g.n_nodes(), 2 + l * (h + 1));
            }
        }
    }

    #[test]
    fn edges_respect_stream_order() {
        let g = build_graph(&cfg(3, 3));
        for e in &g.edges {
            assert_ne!(e.dst, NodeId::Input);
            assert_ne!(e.src, NodeId::Output);
            assert!(e.src.level(3) < e.dst.level(3));
            if let (NodeId::AttnHead { layer: a, .. }, NodeId::AttnHead { layer: b, .. }) = (e.src, e.dst) {
                assert_ne!(a, b);
            }
        }
        let mut sorted = g.edge_nodes.clone();
        sorted.sort();
        assert_eq!(sorted, g.edge_nodes);
    }

    #[test]
    fn node_names_round_trip() {
        let g = build_graph(&cfg(2, 3));
        for n in &g.nodes {
            assert_eq!(n.to_string().parse::<NodeId>().unwrap(), *n);
        }
        assert!("Z3".parse::<NodeId>().is_err());
        assert!("A1".parse::<NodeId>().is_err());
    }

    #[test]
    fn unknown_edge_is_an_argument_error() {
        let g = build_graph(&cfg(1, 1));
        let bogus = Edge { src: NodeId::Mlp { layer: 1 }, dst: NodeId::AttnHead { layer: 1, head: 1 } };
        assert!(matches!(g.mask_from_edges([&bogus]), Err(Error::Argument(_))));
    }
}
