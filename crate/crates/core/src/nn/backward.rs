use super::forward::{check_batch, forward_sample, gelu_grad, Intervention, LnCache, SampleForward};
use super::loss::{cross_entropy, kl_logits_with_grad};
use super::{ModelConfig, Params, ViTModel};
use crate::error::{Error, Result};
use crate::graph::NodeLayout;
use crate::par;
use crate::tensor::{add_assign, matmul, matmul_nt, matmul_tn_acc, Tensor};

#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Mean cross-entropy against integer labels.
    CrossEntropy(Vec<usize>),
    /// Mean `KL(softmax(own) ‖ softmax(reference))` against reference logits `[n, classes]`.
    KlToReference(Tensor),
}

/// Gradients of the mean loss over a batch.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub loss: f64,
    pub params: Params,
    /// Gradient with respect to each node's input `[n, tokens, d_model]`;
    /// `None` for the input node.
    pub node_inputs: Vec<Option<Tensor>>,
}

fn layer_norm_backward(
    cfg: &ModelConfig,
    ln: &LnCache,
    g_y: &[f64],
    gamma: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let d = cfg.d_model;
    let mut g_x = vec![0.0; g_y.len()];
    let mut gh = vec![0.0; d];
    let (mut gg, mut gb) = match grads {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    for r in 0..g_y.len() / d {
        let gy = &g_y[r * d..(r + 1) * d];
        let xh = &ln.xhat[r * d..(r + 1) * d];
        if let (Some(gg), Some(gb)) = (gg.as_deref_mut(), gb.as_deref_mut()) {
            for i in 0..d {
                gg[i] += gy[i] * xh[i];
                gb[i] += gy[i];
            }
        }
        for i in 0..d {
            gh[i] = gy[i] * gamma[i];
        }
        let gx = &mut g_x[r * d..(r + 1) * d];
        if cfg.linear {
            gx.copy_from_slice(&gh);
        } else {
            let m1 = gh.iter().sum::<f64>() / d as f64;
            let m2 = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let rs = ln.rstd[r];
            for i in 0..d {
                gx[i] = rs * (gh[i] - m1 - xh[i] * m2);
            }
        }
    }
    g_x
}

/// Backpropagates `g_logits` through one sample's forward pass.
///
/// Returns the gradient with respect to every node input (empty for the input
/// node). Parameter gradients are accumulated into `grads` when given.
pub(crate) fn backward_sample(
    model: &ViTModel,
    fwd: &SampleForward,
    iv: &Intervention<'_>,
    g_logits: &[f64],
    mut grads: Option<&mut Params>,
) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let p = &model.params;
    let layout = NodeLayout::new(cfg);
    let n_nodes = layout.count();
    let (t, d, dh, dm, h, c) = (
        cfg.tokens(),
        cfg.d_model,
        cfg.d_head,
        cfg.d_mlp,
        cfg.n_heads,
        cfg.n_classes,
    );
    let width = t * d;
    let levels: Vec<usize> = (0..n_nodes).map(|i| layout.level(i)).collect();
    let keep = 1.0 - iv.alpha;

    let mut g_in: Vec<Vec<f64>> = vec![Vec::new(); n_nodes];
    let mut g_written: Vec<Vec<f64>> = vec![vec![0.0; width]; n_nodes - 1];

    // Readout.
    let out_node = layout.output();
    let hw = p.head_w.data();
    let mut g_pooled = vec![0.0; d];
    for i in 0..d {
        g_pooled[i] = (0..c).map(|k| hw[i * c + k] * g_logits[k]).sum();
    }
    if let Some(gr) = grads.as_deref_mut() {
        let ghw = gr.head_w.data_mut();
        for i in 0..d {
            for k in 0..c {
                ghw[i * c + k] += fwd.readout.pooled[i] * g_logits[k];
            }
        }
        add_assign(gr.head_b.data_mut(), g_logits);
    }
    let mut g_y = vec![0.0; width];
    for row in g_y.chunks_mut(d) {
        for (a, b) in row.iter_mut().zip(&g_pooled) {
            *a = b / t as f64;
        }
    }
    let gx = match grads.as_deref_mut() {
        Some(Params { lnf_g, lnf_b, .. }) => layer_norm_backward(
            cfg,
            &fwd.readout.ln,
            &g_y,
            p.lnf_g.data(),
            Some((lnf_g.data_mut(), lnf_b.data_mut())),
        ),
        None => layer_norm_backward(cfg, &fwd.readout.ln, &g_y, p.lnf_g.data(), None),
    };
    g_in[out_node] = gx;

    let distribute = |dst: usize, g: &[f64], g_written: &mut Vec<Vec<f64>>| {
        for src in 0..dst {
            if levels[src] < levels[dst] && !iv.ablated.contains(src, dst) {
                add_assign(&mut g_written[src], g);
            }
        }
    };
    let g_out_node = g_in[out_node].clone();
    distribute(out_node, &g_out_node, &mut g_written);

    let scale = 1.0 / (dh as f64).sqrt();
    for node in (1..out_node).rev() {
        let mut g_o = std::mem::take(&mut g_written[node]);
        if iv.alpha != 0.0 {
            g_o.iter_mut().for_each(|v| *v *= keep);
        }
        let (layer, head) = match layout.node(node) {
            crate::graph::NodeId::AttnHead { layer, head } => (layer, Some(head)),
            crate::graph::NodeId::Mlp { layer } => (layer, None),
            _ => unreachable!("only blocks lie strictly between input and output"),
        };
        let lp = &p.layers[layer - 1];
        let gx = match head {
            Some(hd) => {
                let hi = hd - 1;
                let cache = &fwd.heads[(layer - 1) * h + hi];
                let wsz = d * dh;
                let span = hi * wsz..(hi + 1) * wsz;
                let wq = &lp.wq.data()[span.clone()];
                let wk = &lp.wk.data()[span.clone()];
                let wv = &lp.wv.data()[span.clone()];
                let wo = &lp.wo.data()[span.clone()];
                let mut g_z = vec![0.0; t * dh];
                matmul_nt(&g_o, wo, t, d, dh, &mut g_z);
                let mut g_a = vec![0.0; t * t];
                matmul_nt(&g_z, &cache.v, t, dh, t, &mut g_a);
                let mut g_v = vec![0.0; t * dh];
                matmul_tn_acc(&cache.attn, &g_z, t, t, dh, &mut g_v);
                let mut g_q = vec![0.0; t * dh];
                let mut g_k = vec![0.0; t * dh];
                if !cfg.linear {
                    let mut g_s = vec![0.0; t * t];
                    for r in 0..t {
                        let a = &cache.attn[r * t..(r + 1) * t];
                        let ga = &g_a[r * t..(r + 1) * t];
                        let dotp: f64 = a.iter().zip(ga).map(|(x, y)| x * y).sum();
                        for j in 0..t {
                            g_s[r * t + j] = a[j] * (ga[j] - dotp) * scale;
                        }
                    }
                    matmul(&g_s, &cache.k, t, t, dh, &mut g_q);
                    matmul_tn_acc(&g_s, &cache.q, t, t, dh, &mut g_k);
                }
                if let Some(gr) = grads.as_deref_mut() {
                    let gl = &mut gr.layers[layer - 1];
                    matmul_tn_acc(&cache.z, &g_o, t, dh, d, &mut gl.wo.data_mut()[span.clone()]);
                    matmul_tn_acc(&cache.ln.y, &g_v, t, d, dh, &mut gl.wv.data_mut()[span.clone()]);
                    if !cfg.linear {
                        matmul_tn_acc(&cache.ln.y, &g_q, t, d, dh, &mut gl.wq.data_mut()[span.clone()]);
                        matmul_tn_acc(&cache.ln.y, &g_k, t, d, dh, &mut gl.wk.data_mut()[span.clone()]);
                    }
                }
                let mut g_ln = vec![0.0; width];
                let mut tmp = vec![0.0; width];
                matmul_nt(&g_v, wv, t, dh, d, &mut g_ln);
                if !cfg.linear {
                    matmul_nt(&g_q, wq, t, dh, d, &mut tmp);
                    add_assign(&mut g_ln, &tmp);
                    matmul_nt(&g_k, wk, t, dh, d, &mut tmp);
                    add_assign(&mut g_ln, &tmp);
                }
                match grads.as_deref_mut() {
                    Some(gr) => {
                        let gl = &mut gr.layers[layer - 1];
                        layer_norm_backward(
                            cfg,
                            &cache.ln,
                            &g_ln,
                            lp.ln1_g.data(),
                            Some((gl.ln1_g.data_mut(), gl.ln1_b.data_mut())),
                        )
                    }
                    None => layer_norm_backward(cfg, &cache.ln, &g_ln, lp.ln1_g.data(), None),
                }
            }
            None => {
                let cache = &fwd.mlps[layer - 1];
                let mut g_act = vec![0.0; t * dm];
                matmul_nt(&g_o, lp.w2.data(), t, d, dm, &mut g_act);
                let g_pre: Vec<f64> = if cfg.linear {
                    g_act
                } else {
                    g_act.iter().zip(&cache.pre).map(|(g, &x)| g * gelu_grad(x)).collect()
                };
                if let Some(gr) = grads.as_deref_mut() {
                    let gl = &mut gr.layers[layer - 1];
                    matmul_tn_acc(&cache.act, &g_o, t, dm, d, gl.w2.data_mut());
                    for row in g_o.chunks(d) {
                        add_assign(gl.b2.data_mut(), row);
                    }
                    matmul_tn_acc(&cache.ln.y, &g_pre, t, d, dm, gl.w1.data_mut());
                    for row in g_pre.chunks(dm) {
                        add_assign(gl.b1.data_mut(), row);
                    }
                }
                let mut g_ln = vec![0.0; width];
                matmul_nt(&g_pre, lp.w1.data(), t, dm, d, &mut g_ln);
                match grads.as_deref_mut() {
                    Some(gr) => {
                        let gl = &mut gr.layers[layer - 1];
                        layer_norm_backward(
                            cfg,
                            &cache.ln,
                            &g_ln,
                            lp.ln2_g.data(),
                            Some((gl.ln2_g.data_mut(), gl.ln2_b.data_mut())),
                        )
                    }
                    None => layer_norm_backward(cfg, &cache.ln, &g_ln, lp.ln2_g.data(), None),
                }
            }
        };
        distribute(node, &gx, &mut g_written);
        g_in[node] = gx;
    }

    if let Some(gr) = grads {
        let mut g0 = std::mem::take(&mut g_written[0]);
        if iv.alpha != 0.0 {
            g0.iter_mut().for_each(|v| *v *= keep);
        }
        matmul_tn_acc(&fwd.patches, &g0, t, cfg.patch_dim(), d, gr.patch_w.data_mut());
        for row in g0.chunks(d) {
            add_assign(gr.patch_b.data_mut(), row);
        }
        add_assign(gr.pos.data_mut(), &g0);
    }
    g_in
}

fn locate_non_finite(model: &ViTModel, fwd: &SampleForward) -> String {
    let layout = NodeLayout::new(&model.config);
    for (i, o) in fwd.outs.iter().enumerate() {
        if o.iter().any(|v| !v.is_finite()) {
            return layout.node(i).to_string();
        }
    }
    layout.node(layout.output()).to_string()
}

/// Loss and gradients of the mean loss over `batch`.
pub fn backward(model: &ViTModel, batch: &Tensor, loss: &LossSpec) -> Result<GradientBundle> {
    let cfg = &model.config;
    let n = check_batch(cfg, batch)?;
    if n == 0 {
        return Err(Error::arg("empty batch"));
    }
    match loss {
        LossSpec::CrossEntropy(labels) if labels.len() != n => {
            return Err(Error::arg("label count does not match batch"))
        }
        LossSpec::CrossEntropy(labels) if labels.iter().any(|&l| l >= cfg.n_classes) => {
            return Err(Error::arg("label out of range"))
        }
        LossSpec::KlToReference(r) if r.shape() != [n, cfg.n_classes] => {
            return Err(Error::arg("reference logits have the wrong shape"))
        }
        _ => {}
    }
    let layout = NodeLayout::new(cfg);
    let iv = Intervention::none(layout.count());
    let per_sample: Vec<Result<(f64, Params, Vec<Vec<f64>>)>> = par::map_range(n, |i| {
        let fwd = forward_sample(model, batch.row(i), &iv)?;
        let (l, mut g) = match loss {
            LossSpec::CrossEntropy(labels) => cross_entropy(&fwd.logits, labels[i]),
            LossSpec::KlToReference(r) => kl_logits_with_grad(&fwd.logits, r.row(i), true),
        };
        if !l.is_finite() {
            return Err(Error::NonFinite {
                node: locate_non_finite(model, &fwd),
                detail: format!("loss is {l} for sample {i}"),
            });
        }
        g.iter_mut().for_each(|v| *v /= n as f64);
        let mut grads = Params::zeros(cfg);
        let g_in = backward_sample(model, &fwd, &iv, &g, Some(&mut grads));
        Ok((l, grads, g_in))
    });
    let mut total = 0.0;
    let mut params = Params::zeros(cfg);
    let mut node_inputs: Vec<Vec<f64>> = vec![Vec::new(); layout.count()];
    for r in per_sample {
        let (l, g, g_in) = r?;
        total += l;
        params.add_assign(&g);
        for (acc, gi) in node_inputs.iter_mut().zip(g_in) {
            acc.extend(gi);
        }
    }
    let (t, d) = (cfg.tokens(), cfg.d_model);
    let node_inputs = node_inputs
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i == 0 { Ok(None) } else { Tensor::new(vec![n, t, d], v).map(Some) })
        .collect::<Result<_>>()?;
    Ok(GradientBundle {
        loss: total / n as f64,
        params,
        node_inputs,
    })
}
