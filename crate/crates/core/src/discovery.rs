//! Circuit extraction: per-edge importance weights over the computational
//! graph, and faithfulness of the resulting top-k circuits.
//!
//! * `exact`: mean over samples of `KL(ablated ‖ clean)` with one edge
//!   mean-ablated at a time.
//! * `eap`: the network is linearised around the clean activations. One
//!   backward pass per class gives the logit Jacobian with respect to every
//!   node input; the linearised logit change of edge `u→v` is that Jacobian
//!   applied to `mean_u − out_u`, and the weight is the KL of the shifted
//!   logits against the clean ones.
//! * `eap-ig`: as `eap` with the Jacobian averaged over points that move
//!   every node's write from its clean value toward its cached mean. The
//!   shift is treated as a constant when differentiating.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{check_cache, CompGraph, Edge, EdgeMask, MeanCache};
use crate::nn::{self, backward_sample, forward_sample, Intervention, SampleForward, ViTModel};
use crate::par;
use crate::tensor::{dot, softmax};

/// Default number of integration points for EAP-IG.
pub const DEFAULT_IG_STEPS: usize = 5;

/// Edge fractions at which faithfulness is sampled for CPR/CMD.
pub const DEFAULT_K_GRID: [f64; 9] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Exact,
    Eap,
    EapIg { steps: usize },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Eap => "eap",
            Method::EapIg { .. } => "eap-ig",
        }
    }

    pub fn parse(name: &str, steps: usize) -> Result<Self> {
        match name {
            "exact" => Ok(Method::Exact),
            "eap" => Ok(Method::Eap),
            "eap-ig" if steps >= 1 => Ok(Method::EapIg { steps }),
            "eap-ig" => Err(Error::arg("eap-ig needs at least one step")),
            other => Err(Error::arg(format!("unknown discovery method {other:?}"))),
        }
    }
}

/// Edge weights of one (model, dataset) pair, in canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitWeights {
    pub model_id: String,
    pub dataset_id: String,
    pub method: Method,
    pub weights: Vec<f64>,
    /// Signed first-order scores from gradient methods: the linearised change
    /// in log-probability of the clean prediction.
    pub signed: Option<Vec<f64>>,
}

impl CircuitWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn check_graph(&self, graph: &CompGraph) -> Result<()> {
        if self.weights.len() != graph.n_edges() {
            return Err(Error::arg(format!(
                "circuit has {} weights but the graph has {} edges",
                self.weights.len(),
                graph.n_edges()
            )));
        }
        Ok(())
    }
}

/// Uniform random weights in [0, 1); the baseline circuit for faithfulness.
pub fn random_circuit(graph: &CompGraph, model_id: &str, seed: u64) -> CircuitWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CircuitWeights {
        model_id: model_id.to_string(),
        dataset_id: format!("random-{seed}"),
        method: Method::Exact,
        weights: (0..graph.n_edges()).map(|_| rng.random::<f64>()).collect(),
        signed: None,
    }
}

fn check_inputs(model: &ViTModel, data: &Dataset, graph: &CompGraph, cache: &MeanCache) -> Result<()> {
    if data.is_empty() {
        return Err(Error::arg("circuit discovery needs a non-empty dataset"));
    }
    if graph.config != model.config {
        return Err(Error::arg("graph was built for a different model configuration"));
    }
    if data.sample_len() != model.config.image_len() {
        return Err(Error::arg("dataset images do not match the model input shape"));
    }
    check_cache(model, cache)
}

fn clean_forwards(model: &ViTModel, data: &Dataset) -> Result<Vec<SampleForward>> {
    let iv = Intervention::none(model_nodes(model));
    par::map_range(data.len(), |i| forward_sample(model, &data.image_f64(i), &iv))
        .into_iter()
        .collect()
}

fn model_nodes(model: &ViTModel) -> usize {
    crate::graph::NodeLayout::new(&model.config).count()
}

fn mean_in_order(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for r in rows {
        crate::tensor::add_assign(&mut acc, r);
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

/// Exact per-edge ablation weights.
pub fn exact_circuit(
    model: &ViTModel,
    data: &Dataset,
    graph: &CompGraph,
    cache: &MeanCache,
) -> Result<CircuitWeights> {
    check_inputs(model, data, graph, cache)?;
    let clean = clean_forwards(model, data)?;
    let images: Vec<Vec<f64>> = (0..data.len()).map(|i| data.image_f64(i)).collect();
    let per_edge: Vec<Result<f64>> = par::map_range(graph.n_edges(), |e| {
        let mask = graph.mask_from_indices([e]);
        let iv = Intervention {
            ablated: mask,
            means: Some(cache),
            alpha: 0.0,
        };
        let mut sum = 0.0;
        for (img, cl) in images.iter().zip(&clean) {
            let ab = forward_sample(model, img, &iv)?;
            let kl = nn::kl_logits(&ab.logits, &cl.logits);
            if !kl.is_finite() {
                return Err(Error::NonFinite {
                    node: graph.edges[e].to_string(),
                    detail: "ablated KL is not finite".into(),
                });
            }
            sum += kl;
        }
        Ok(sum / images.len() as f64)
    });
    let weights = per_edge.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(CircuitWeights {
        model_id: model.id.clone(),
        dataset_id: data.id.clone(),
        method: Method::Exact,
        weights,
        signed: None,
    })
}

/// Edge attribution patching: a single linearisation at the clean point.
pub fn eap_circuit(
    model: &ViTModel,
    data: &Dataset,
    graph: &CompGraph,
    cache: &MeanCache,
) -> Result<CircuitWeights> {
    let (weights, signed) = linearised_attribution(model, data, graph, cache, 1)?;
    Ok(CircuitWeights {
        model_id: model.id.clone(),
        dataset_id: data.id.clone(),
        method: Method::Eap,
        weights,
        signed: Some(signed),
    })
}

/// EAP with the Jacobian integrated over `steps` points toward the means.
pub fn eap_ig_circuit(
    model: &ViTModel,
    data: &Dataset,
    graph: &CompGraph,
    cache: &MeanCache,
    steps: usize,
) -> Result<CircuitWeights> {
    if steps == 0 {
        return Err(Error::arg("eap-ig needs at least one step"));
    }
    let (weights, signed) = linearised_attribution(model, data, graph, cache, steps)?;
    Ok(CircuitWeights {
        model_id: model.id.clone(),
        dataset_id: data.id.clone(),
        method: Method::EapIg { steps },
        weights,
        signed: Some(signed),
    })
}

/// Dispatches on `method`.
pub fn discover(
    model: &ViTModel,
    data: &Dataset,
    graph: &CompGraph,
    cache: &MeanCache,
    method: Method,
) -> Result<CircuitWeights> {
    match method {
        Method::Exact => exact_circuit(model, data, graph, cache),
        Method::Eap => eap_circuit(model, data, graph, cache),
        Method::EapIg { steps } => eap_ig_circuit(model, data, graph, cache, steps),
    }
}

fn linearised_attribution(
    model: &ViTModel,
    data: &Dataset,
    graph: &CompGraph,
    cache: &MeanCache,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(model, data, graph, cache)?;
    let n_classes = model.config.n_classes;
    let n_edges = graph.n_edges();
    let n_nodes = graph.n_nodes();
    let inv_steps = 1.0 / steps as f64;

    let per_sample: Vec<Result<(Vec<f64>, Vec<f64>)>> = par::map_range(data.len(), |i| {
        let img = data.image_f64(i);
        let clean = forward_sample(model, &img, &Intervention::none(n_nodes))?;
        // jac[c][v]: d logit_c / d input_v, averaged over the path
        let mut jac: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n_nodes]; n_classes];
        for k in 0..steps {
            let iv = Intervention {
                ablated: EdgeMask::empty(n_nodes),
                means: Some(cache),
                alpha: k as f64 * inv_steps,
            };
            let fwd = if k == 0 { clean.clone() } else { forward_sample(model, &img, &iv)? };
            // the shift toward the means is held constant in the backward pass
            let through = Intervention::none(n_nodes);
            for (c, jc) in jac.iter_mut().enumerate() {
                let mut onehot = vec![0.0; n_classes];
                onehot[c] = 1.0;
                let g = backward_sample(model, &fwd, &through, &onehot, None);
                for (acc, gv) in jc.iter_mut().zip(g) {
                    if acc.is_empty() {
                        *acc = gv.iter().map(|v| v * inv_steps).collect();
                    } else {
                        for (a, b) in acc.iter_mut().zip(&gv) {
                            *a += b * inv_steps;
                        }
                    }
                }
            }
        }
        let z = &clean.logits;
        let p = softmax(z);
        let pred = nn::argmax(z);
        let mut w = Vec::with_capacity(n_edges);
        let mut s = Vec::with_capacity(n_edges);
        let mut delta = vec![0.0; cache.means[0].len()];
        for &(src, dst) in &graph.edge_nodes {
            for ((d, m), o) in delta.iter_mut().zip(&cache.means[src]).zip(&clean.outs[src]) {
                *d = m - o;
            }
            let dz: Vec<f64> = (0..n_classes).map(|c| dot(&jac[c][dst], &delta)).collect();
            let shifted: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
            let kl = nn::kl_logits(&shifted, z);
            if !kl.is_finite() {
                return Err(Error::NonFinite {
                    node: graph.layout.node(dst).to_string(),
                    detail: "attribution is not finite".into(),
                });
            }
            w.push(kl);
            s.push(dz[pred] - p.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>());
        }
        Ok((w, s))
    });
    let mut ws = Vec::with_capacity(data.len());
    let mut ss = Vec::with_capacity(data.len());
    for r in per_sample {
        let (w, s) = r?;
        ws.push(w);
        ss.push(s);
    }
    let weights = mean_in_order(&ws, n_edges).into_iter().map(f64::abs).collect();
    Ok((weights, mean_in_order(&ss, n_edges)))
}

/// Indices of the `k` largest |weights|; ties go to the earlier edge.
/// Returned in canonical edge order.
pub fn top_k_indices(c: &CircuitWeights, k: usize) -> Result<Vec<usize>> {
    let n = c.weights.len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("k must lie in 1..={n}, got {k}")));
    }
    Ok(top_k_unchecked(&c.weights, k))
}

fn top_k_unchecked(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// The `k` edges of largest |weight|, in canonical order.
pub fn prune_top_k(c: &CircuitWeights, graph: &CompGraph, k: usize) -> Result<Vec<Edge>> {
    c.check_graph(graph)?;
    Ok(top_k_indices(c, k)?.into_iter().map(|i| graph.edges[i]).collect())
}

/// Normalisation of the faithfulness score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaithfulnessForm {
    /// `(KL_C − KL_∅) / (1 − KL_∅)`.
    Verbatim,
    /// `1 − KL_C / KL_∅`, i.e. normalised between the empty and full circuits.
    Normalized,
}

/// Caches clean logits and the empty-circuit KL so many fractions can be
/// evaluated cheaply.
pub struct FaithfulnessEvaluator<'a> {
    model: &'a ViTModel,
    graph: &'a CompGraph,
    cache: &'a MeanCache,
    images: Vec<Vec<f64>>,
    clean: Vec<Vec<f64>>,
    kl_empty: f64,
}

impl<'a> FaithfulnessEvaluator<'a> {
    pub fn new(model: &'a ViTModel, data: &Dataset, graph: &'a CompGraph, cache: &'a MeanCache) -> Result<Self> {
        check_inputs(model, data, graph, cache)?;
        let clean = clean_forwards(model, data)?.into_iter().map(|f| f.logits).collect();
        let images = (0..data.len()).map(|i| data.image_f64(i)).collect();
        let mut ev = Self {
            model,
            graph,
            cache,
            images,
            clean,
            kl_empty: 0.0,
        };
        ev.kl_empty = ev.kl_with_kept(&[])?;
        Ok(ev)
    }

    pub fn kl_empty(&self) -> f64 {
        self.kl_empty
    }

    /// Mean `KL(clean ‖ ablated)` with every edge outside `kept` ablated.
    pub fn kl_with_kept(&self, kept: &[usize]) -> Result<f64> {
        let mut keep = vec![false; self.graph.n_edges()];
        for &k in kept {
            keep[k] = true;
        }
        let mask = self
            .graph
            .mask_from_indices((0..self.graph.n_edges()).filter(|&e| !keep[e]));
        let iv = Intervention {
            ablated: mask,
            means: Some(self.cache),
            alpha: 0.0,
        };
        let kls: Vec<Result<f64>> = par::map_range(self.images.len(), |i| {
            let ab = forward_sample(self.model, &self.images[i], &iv)?;
            Ok(nn::kl_logits(&self.clean[i], &ab.logits))
        });
        let mut sum = 0.0;
        for k in kls {
            sum += k?;
        }
        Ok(sum / self.images.len() as f64)
    }

    pub fn kept_count(&self, frac: f64) -> usize {
        let n = self.graph.n_edges();
        ((frac * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
    }

    pub fn faithfulness(&self, c: &CircuitWeights, frac: f64, form: FaithfulnessForm) -> Result<f64> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::arg(format!("edge fraction {frac} is outside [0, 1]")));
        }
        c.check_graph(self.graph)?;
        let k = self.kept_count(frac);
        let kept = if k == 0 { Vec::new() } else { top_k_unchecked(&c.weights, k) };
        let kl_c = self.kl_with_kept(&kept)?;
        let kl0 = self.kl_empty;
        match form {
            FaithfulnessForm::Verbatim => {
                let denom = 1.0 - kl0;
                if denom.abs() < 1e-9 {
                    return Err(Error::degenerate("1 − KL(empty circuit) is numerically zero"));
                }
                Ok((kl_c - kl0) / denom)
            }
            FaithfulnessForm::Normalized => {
                if kl0.abs() < 1e-12 {
                    return Err(Error::degenerate("ablating every edge leaves the output unchanged"));
                }
                Ok((kl0 - kl_c) / kl0)
            }
        }
    }
}

/// Faithfulness of the top-⌈frac·|E|⌉ circuit.
pub fn faithfulness(
    model: &ViTModel,
    data: &Dataset,
    graph: &CompGraph,
    cache: &MeanCache,
    c: &CircuitWeights,
    frac: f64,
    form: FaithfulnessForm,
) -> Result<f64> {
    FaithfulnessEvaluator::new(model, data, graph, cache)?.faithfulness(c, frac, form)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub form: FaithfulnessForm,
    pub k_grid: Vec<f64>,
    pub f_values: Vec<f64>,
    pub cpr: f64,
    pub cmd: f64,
}

/// Trapezoidal CPR and CMD over `grid` with `f(0) = 0` prepended.
pub fn integrate_faithfulness(grid: &[f64], f_values: &[f64]) -> Result<(f64, f64)> {
    if grid.len() != f_values.len() {
        return Err(Error::arg("grid and faithfulness values differ in length"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.first().is_some_and(|&g| g <= 0.0) {
        return Err(Error::arg("k grid must be strictly increasing within (0, 1]"));
    }
    let xs: Vec<f64> = std::iter::once(0.0).chain(grid.iter().copied()).collect();
    let fs: Vec<f64> = std::iter::once(0.0).chain(f_values.iter().copied()).collect();
    let mut cpr = 0.0;
    let mut cmd = 0.0;
    for i in 1..xs.len() {
        let h = xs[i] - xs[i - 1];
        cpr += 0.5 * h * (fs[i] + fs[i - 1]);
        cmd += 0.5 * h * ((1.0 - fs[i]).abs() + (1.0 - fs[i - 1]).abs());
    }
    Ok((cpr, cmd))
}

pub fn cpr_cmd(
    model: &ViTModel,
    data: &Dataset,
    graph: &CompGraph,
    cache: &MeanCache,
    c: &CircuitWeights,
    form: FaithfulnessForm,
) -> Result<FaithfulnessReport> {
    let ev = FaithfulnessEvaluator::new(model, data, graph, cache)?;
    report_with(&ev, c, form, &DEFAULT_K_GRID)
}

pub fn report_with(
    ev: &FaithfulnessEvaluator<'_>,
    c: &CircuitWeights,
    form: FaithfulnessForm,
    grid: &[f64],
) -> Result<FaithfulnessReport> {
    let f_values = grid
        .iter()
        .map(|&k| ev.faithfulness(c, k, form))
        .collect::<Result<Vec<_>>>()?;
    let (cpr, cmd) = integrate_faithfulness(grid, &f_values)?;
    Ok(FaithfulnessReport {
        form,
        k_grid: grid.to_vec(),
        f_values,
        cpr,
        cmd,
    })
}

// ---------------------------------------------------------------------------
// Circuit files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    src: crate::graph::NodeId,
    dst: crate::graph::NodeId,
    weight: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CircuitFile {
    schema: String,
    model_id: String,
    dataset_id: String,
    method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    steps: Option<usize>,
    edges: Vec<EdgeRecord>,
}

pub const CIRCUIT_SCHEMA: &str = "circuit/1";

pub fn circuit_to_json(c: &CircuitWeights, graph: &CompGraph) -> Result<String> {
    c.check_graph(graph)?;
    let file = CircuitFile {
        schema: CIRCUIT_SCHEMA.into(),
        model_id: c.model_id.clone(),
        dataset_id: c.dataset_id.clone(),
        method: c.method.name().into(),
        steps: match c.method {
            Method::EapIg { steps } => Some(steps),
            _ => None,
        },
        edges: graph
            .edges
            .iter()
            .zip(&c.weights)
            .map(|(e, &w)| EdgeRecord {
                src: e.src,
                dst: e.dst,
                weight: w,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parses a circuit file; edges must appear exactly in canonical order.
pub fn circuit_from_json(text: &str, graph: &CompGraph) -> Result<CircuitWeights> {
    let file: CircuitFile = serde_json::from_str(text)?;
    if file.schema != CIRCUIT_SCHEMA {
        return Err(Error::Format(format!("unsupported circuit schema {:?}", file.schema)));
    }
    let method = Method::parse(&file.method, file.steps.unwrap_or(DEFAULT_IG_STEPS))?;
    if file.edges.len() != graph.n_edges() {
        return Err(Error::Format("circuit edge count does not match the graph".into()));
    }
    for (rec, e) in file.edges.iter().zip(&graph.edges) {
        if rec.src != e.src || rec.dst != e.dst {
            return Err(Error::Format(format!(
                "edge {}->{} is out of canonical order (expected {e})",
                rec.src, rec.dst
            )));
        }
    }
    Ok(CircuitWeights {
        model_id: file.model_id,
        dataset_id: file.dataset_id,
        method,
        weights: file.edges.iter().map(|r| r.weight).collect(),
        signed: None,
    })
}

pub fn save_circuit(c: &CircuitWeights, graph: &CompGraph, path: &Path) -> Result<()> {
    std::fs::write(path, circuit_to_json(c, graph)? + "\n")?;
    Ok(())
}

pub fn load_circuit(path: &Path, graph: &CompGraph) -> Result<CircuitWeights> {
    circuit_from_json(&std::fs::read_to_string(path)?, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::nn::ModelConfig;

    fn with_weights(w: Vec<f64>) -> CircuitWeights {
        CircuitWeights {
            model_id: "m".into(),
            dataset_id: "d".into(),
            method: Method::Exact,
            weights: w,
            signed: None,
        }
    }

    #[test]
    fn top_k_full_set_and_ties() {
        let c = with_weights(vec![1.0; 6]);
        assert_eq!(top_k_indices(&c, 6).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(top_k_indices(&c, 3).unwrap(), vec![0, 1, 2]);
        assert!(top_k_indices(&c, 0).is_err());
        assert!(top_k_indices(&c, 7).is_err());
    }

    #[test]
    fn top_k_picks_largest_magnitudes() {
        let c = with_weights((0..6).map(|i| i as f64).collect());
        assert_eq!(top_k_indices(&c, 2).unwrap(), vec![4, 5]);
        let c = with_weights(vec![0.1, -5.0, 0.3, 2.0]);
        assert_eq!(top_k_indices(&c, 2).unwrap(), vec![1, 3]);
    }

    #[test]
    fn integration_of_constant_profiles() {
        let grid = DEFAULT_K_GRID;
        let (cpr, cmd) = integrate_faithfulness(&grid, &[0.0; 9]).unwrap();
        assert_eq!((cpr, cmd), (0.0, 1.0));
        // f ≡ 1 on the grid, with f(0) = 0 prepended: only the first panel deviates
        let (cpr, cmd) = integrate_faithfulness(&grid, &[1.0; 9]).unwrap();
        assert!((cpr - (1.0 - 0.005)).abs() < 1e-15);
        assert!((cmd - 0.005).abs() < 1e-15);
        assert!(integrate_faithfulness(&[0.5, 0.2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn circuit_json_round_trip_and_order_check() {
        let g = build_graph(&ModelConfig::tiny());
        let c = CircuitWeights {
            method: Method::EapIg { steps: 5 },
            ..with_weights(vec![0.5, 0.25, 1.0, 0.0, 2.0, 3.5])
        };
        let text = circuit_to_json(&c, &g).unwrap();
        assert!(text.contains("\"schema\": \"circuit/1\""));
        assert!(text.contains("\"steps\": 5"));
        let back = circuit_from_json(&text, &g).unwrap();
        assert_eq!(back.weights, c.weights);
        assert_eq!(back.method, c.method);
        let swapped = text.replacen("\"src\": \"I\"", "\"src\": \"M1\"", 1);
        assert!(circuit_from_json(&swapped, &g).is_err());
    }
}
