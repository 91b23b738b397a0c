use super::{patchify, ModelConfig, ViTModel, LN_EPS};
use crate::error::{Error, Result};
use crate::graph::{EdgeMask, MeanCache, NodeId, NodeLayout};
use crate::par;
use crate::tensor::{matmul, matmul_nt, softmax_in_place, Tensor};

/// How node outputs are mixed into each reader's view of the stream.
///
/// A reader `v` sees `Σ_u w(u→v)` over all upstream writers `u`, where
/// `w(u→v)` is the cached mean of `u` if the edge is ablated and otherwise
/// `out_u + alpha · (mean_u − out_u)`.
#[derive(Debug, Clone)]
pub struct Intervention<'a> {
    pub ablated: EdgeMask,
    pub means: Option<&'a MeanCache>,
    pub alpha: f64,
}

impl<'a> Intervention<'a> {
    pub fn none(n_nodes: usize) -> Self {
        Self {
            ablated: EdgeMask::empty(n_nodes),
            means: None,
            alpha: 0.0,
        }
    }

    fn needs_means(&self) -> bool {
        !self.ablated.is_empty() || self.alpha != 0.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub ln: LnCache,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub attn: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    pub ln: LnCache,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ReadoutCache {
    pub ln: LnCache,
    pub pooled: Vec<f64>,
}

/// Everything one sample's forward pass needs to keep for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub(crate) patches: Vec<f64>,
    /// Node outputs `[tokens × d_model]`; empty for the output node.
    pub(crate) outs: Vec<Vec<f64>>,
    /// Node inputs (the reader's stream view); empty for the input node.
    pub(crate) inputs: Vec<Vec<f64>>,
    pub(crate) heads: Vec<HeadCache>,
    pub(crate) mlps: Vec<MlpCache>,
    pub(crate) readout: ReadoutCache,
    pub logits: Vec<f64>,
}

impl SampleForward {
    pub fn node_outputs(self) -> Vec<Vec<f64>> {
        self.outs
    }

    pub fn node_output(&self, node: usize) -> &[f64] {
        &self.outs[node]
    }

    pub fn node_input(&self, node: usize) -> &[f64] {
        &self.inputs[node]
    }
}

/// Per-node inputs and outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub nodes: Vec<NodeId>,
    /// `[n, tokens, d_model]` stream view read by each node; `None` for the input node.
    pub inputs: Vec<Option<Tensor>>,
    /// `[n, tokens, d_model]` written by each node; the output node holds the
    /// logits `[n, n_classes]`.
    pub outputs: Vec<Tensor>,
}

pub(crate) fn layer_norm(cfg: &ModelConfig, x: &[f64], g: &[f64], b: &[f64]) -> LnCache {
    let d = cfg.d_model;
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![1.0; rows];
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let xh = &mut xhat[r * d..(r + 1) * d];
        if cfg.linear {
            xh.copy_from_slice(row);
        } else {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            yr[i] = g[i] * xh[i] + b[i];
        }
    }
    LnCache { xhat, rstd, y }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Runs one image `[c, s, s]` through the model under `iv`.
pub(crate) fn forward_sample(model: &ViTModel, image: &[f64], iv: &Intervention<'_>) -> Result<SampleForward> {
    let cfg = &model.config;
    let p = &model.params;
    let layout = NodeLayout::new(cfg);
    let n_nodes = layout.count();
    if iv.needs_means() && iv.means.is_none() {
        return Err(Error::arg("ablation or interpolation requested without a mean cache"));
    }
    if iv.ablated.n_nodes() != n_nodes {
        return Err(Error::arg("edge mask does not match the model's graph"));
    }
    let (t, d, dh, dm, h) = (cfg.tokens(), cfg.d_model, cfg.d_head, cfg.d_mlp, cfg.n_heads);
    let width = t * d;
    let levels: Vec<usize> = (0..n_nodes).map(|i| layout.level(i)).collect();

    let patches = patchify(cfg, image);
    let mut outs: Vec<Vec<f64>> = vec![Vec::new(); n_nodes];
    let mut written: Vec<Vec<f64>> = if iv.alpha != 0.0 { vec![Vec::new(); n_nodes] } else { Vec::new() };
    let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); n_nodes];
    let mut heads = Vec::with_capacity(cfg.n_layers * h);
    let mut mlps = Vec::with_capacity(cfg.n_layers);

    // Input node: patch embedding plus position embedding.
    let mut emb = vec![0.0; width];
    matmul(&patches, p.patch_w.data(), t, cfg.patch_dim(), d, &mut emb);
    for r in 0..t {
        for i in 0..d {
            emb[r * d + i] += p.patch_b.data()[i] + p.pos.data()[r * d + i];
        }
    }
    outs[0] = emb;

    let alpha = iv.alpha;
    let record_written = |node: usize, outs: &Vec<Vec<f64>>, written: &mut Vec<Vec<f64>>| {
        if alpha != 0.0 {
            let mean = &iv.means.expect("checked above").means[node];
            written[node] = outs[node]
                .iter()
                .zip(mean)
                .map(|(&o, &m)| o + alpha * (m - o))
                .collect();
        }
    };
    record_written(0, &outs, &mut written);

    let view = |dst: usize, outs: &Vec<Vec<f64>>, written: &Vec<Vec<f64>>| -> Vec<f64> {
        let mut acc = vec![0.0; width];
        for src in 0..dst {
            if levels[src] >= levels[dst] {
                continue;
            }
            let contrib: &[f64] = if iv.ablated.contains(src, dst) {
                &iv.means.expect("checked above").means[src]
            } else if alpha != 0.0 {
                &written[src]
            } else {
                &outs[src]
            };
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        acc
    };

    let scale = 1.0 / (dh as f64).sqrt();
    for (li, lp) in p.layers.iter().enumerate() {
        let layer = li + 1;
        for hi in 0..h {
            let node = layout.head(layer, hi + 1);
            let x_in = view(node, &outs, &written);
            let ln = layer_norm(cfg, &x_in, lp.ln1_g.data(), lp.ln1_b.data());
            let wsz = d * dh;
            let (wq, wk, wv) = (
                &lp.wq.data()[hi * wsz..(hi + 1) * wsz],
                &lp.wk.data()[hi * wsz..(hi + 1) * wsz],
                &lp.wv.data()[hi * wsz..(hi + 1) * wsz],
            );
            let wo = &lp.wo.data()[hi * wsz..(hi + 1) * wsz];
            let mut q = vec![0.0; t * dh];
            let mut k = vec![0.0; t * dh];
            let mut v = vec![0.0; t * dh];
            matmul(&ln.y, wv, t, d, dh, &mut v);
            let mut attn = vec![0.0; t * t];
            if cfg.linear {
                attn.iter_mut().for_each(|a| *a = 1.0 / t as f64);
            } else {
                matmul(&ln.y, wq, t, d, dh, &mut q);
                matmul(&ln.y, wk, t, d, dh, &mut k);
                matmul_nt(&q, &k, t, dh, t, &mut attn);
                for row in attn.chunks_mut(t) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
            }
            let mut z = vec![0.0; t * dh];
            matmul(&attn, &v, t, t, dh, &mut z);
            let mut o = vec![0.0; width];
            matmul(&z, wo, t, dh, d, &mut o);
            outs[node] = o;
            record_written(node, &outs, &mut written);
            inputs[node] = x_in;
            heads.push(HeadCache { ln, q, k, v, attn, z });
        }

        let node = layout.mlp(layer);
        let x_in = view(node, &outs, &written);
        let ln = layer_norm(cfg, &x_in, lp.ln2_g.data(), lp.ln2_b.data());
        let mut pre = vec![0.0; t * dm];
        matmul(&ln.y, lp.w1.data(), t, d, dm, &mut pre);
        for row in pre.chunks_mut(dm) {
            for (v, b) in row.iter_mut().zip(lp.b1.data()) {
                *v += b;
            }
        }
        let act: Vec<f64> = if cfg.linear {
            pre.clone()
        } else {
            pre.iter().map(|&x| gelu(x)).collect()
        };
        let mut o = vec![0.0; width];
        matmul(&act, lp.w2.data(), t, dm, d, &mut o);
        for row in o.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(lp.b2.data()) {
                *v += b;
            }
        }
        outs[node] = o;
        record_written(node, &outs, &mut written);
        inputs[node] = x_in;
        mlps.push(MlpCache { ln, pre, act });
    }

    let out_node = layout.output();
    let x_in = view(out_node, &outs, &written);
    let ln = layer_norm(cfg, &x_in, p.lnf_g.data(), p.lnf_b.data());
    let mut pooled = vec![0.0; d];
    for row in ln.y.chunks(d) {
        for (a, v) in pooled.iter_mut().zip(row) {
            *a += v;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= t as f64);
    let c = cfg.n_classes;
    let mut logits = p.head_b.data().to_vec();
    for i in 0..d {
        let pi = pooled[i];
        for (l, w) in logits.iter_mut().zip(&p.head_w.data()[i * c..(i + 1) * c]) {
            *l += pi * w;
        }
    }
    inputs[out_node] = x_in;

    Ok(SampleForward {
        patches,
        outs,
        inputs,
        heads,
        mlps,
        readout: ReadoutCache { ln, pooled },
        logits,
    })
}

pub(crate) fn check_batch(cfg: &ModelConfig, batch: &Tensor) -> Result<usize> {
    let want = [cfg.channels, cfg.image_side, cfg.image_side];
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != want {
        return Err(Error::Config(format!(
            "batch shape {:?} does not match [n, {}, {}, {}]",
            shape, want[0], want[1], want[2]
        )));
    }
    Ok(shape[0])
}

/// Plain forward pass: logits `[n, n_classes]` and the per-node trace.
pub fn forward(model: &ViTModel, batch: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    let iv = Intervention::none(NodeLayout::new(&model.config).count());
    forward_with(model, batch, &iv)
}

/// Forward pass under an intervention.
pub fn forward_with(model: &ViTModel, batch: &Tensor, iv: &Intervention<'_>) -> Result<(Tensor, ActivationTrace)> {
    let cfg = &model.config;
    let n = check_batch(cfg, batch)?;
    let samples: Vec<SampleForward> = par::map_range(n, |i| forward_sample(model, batch.row(i), iv))
        .into_iter()
        .collect::<Result<_>>()?;
    let layout = NodeLayout::new(cfg);
    let (t, d, c) = (cfg.tokens(), cfg.d_model, cfg.n_classes);
    let logits: Vec<f64> = samples.iter().flat_map(|s| s.logits.iter().copied()).collect();
    let logits = Tensor::new(vec![n, c], logits)?;
    let mut inputs = Vec::with_capacity(layout.count());
    let mut outputs = Vec::with_capacity(layout.count());
    for node in 0..layout.count() {
        if node == 0 {
            inputs.push(None);
        } else {
            let data = samples.iter().flat_map(|s| s.inputs[node].iter().copied()).collect();
            inputs.push(Some(Tensor::new(vec![n, t, d], data)?));
        }
        if node == layout.output() {
            outputs.push(logits.clone());
        } else {
            let data = samples.iter().flat_map(|s| s.outs[node].iter().copied()).collect();
            outputs.push(Tensor::new(vec![n, t, d], data)?);
        }
    }
    let trace = ActivationTrace {
        nodes: (0..layout.count()).map(|i| layout.node(i)).collect(),
        inputs,
        outputs,
    };
    Ok((logits, trace))
}
