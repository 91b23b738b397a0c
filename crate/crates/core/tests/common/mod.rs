//! Reference computations shared by the integration tests.

#![allow(dead_code)]

use circuitscope::data::Dataset;
use circuitscope::nn::{backward, LossSpec, ModelConfig, Params, ViTModel};
use circuitscope::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_side: 4,
        channels: 2,
        patch_side: 2,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 8,
        n_classes: 3,
        linear: false,
    }
}

pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * cfg.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, cfg.channels, cfg.image_side, cfg.image_side], data).unwrap()
}

pub fn random_data(cfg: &ModelConfig, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        id: format!("rand{seed}"),
        channels: cfg.channels,
        height: cfg.image_side,
        width: cfg.image_side,
        pixels: (0..n * cfg.image_len()).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        labels: (0..n).map(|i| (i % cfg.n_classes) as u16).collect(),
        seed,
    }
}

pub fn model(cfg: ModelConfig, seed: u64) -> ViTModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ViTModel::init(cfg, "m", &mut rng).unwrap();
    // larger weights so ablations move the logits noticeably
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 1.5);
    }
    m
}

// ---------------------------------------------------------------------------
// One-block, one-head reference with explicit per-reader inputs.
// ---------------------------------------------------------------------------

pub type Mat = Vec<Vec<f64>>;

pub fn affine(x: &Mat, w: &[f64], b: Option<&[f64]>, cols: usize) -> Mat {
    x.iter()
        .map(|r| {
            (0..cols)
                .map(|j| b.map_or(0.0, |b| b[j]) + r.iter().enumerate().map(|(i, v)| v * w[i * cols + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter().zip(g).zip(b).map(|((v, g), b)| g * (v - mu) / (var + 1e-5).sqrt() + b).collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Node outputs `[I, A1.1, M1]` and logits; `ablated[u][v]` replaces the
/// write of `u` into `v` by `means[u]`.
pub fn reference(m: &ViTModel, img: &[f64], ablated: &[[bool; 4]; 3], means: &[Mat]) -> (Vec<Mat>, Vec<f64>) {
    let c = &m.config;
    let p = &m.params;
    let l = &p.layers[0];
    let (s, ps, d) = (c.image_side, c.patch_side, c.d_model);
    let per = s / ps;
    let mut patches = Mat::new();
    for py in 0..per {
        for px in 0..per {
            let mut v = vec![];
            for ch in 0..c.channels {
                for iy in 0..ps {
                    for ix in 0..ps {
                        v.push(img[ch * s * s + (py * ps + iy) * s + px * ps + ix]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let t = patches.len();
    let mut out_i = affine(&patches, p.patch_w.data(), Some(p.patch_b.data()), d);
    for (r, row) in out_i.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += p.pos.data()[r * d + j];
        }
    }
    let mut outs = vec![out_i];
    let view = |outs: &Vec<Mat>, u: usize, v: usize| if ablated[u][v] { means[u].clone() } else { outs[u].clone() };

    let h = norm(&view(&outs, 0, 1), l.ln1_g.data(), l.ln1_b.data());
    let q = affine(&h, l.wq.data(), None, c.d_head);
    let k = affine(&h, l.wk.data(), None, c.d_head);
    let v = affine(&h, l.wv.data(), None, c.d_head);
    let mut z = vec![vec![0.0; c.d_head]; t];
    for i in 0..t {
        let sc: Vec<f64> = (0..t)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c.d_head as f64).sqrt())
            .collect();
        let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let den: f64 = sc.iter().map(|x| (x - mx).exp()).sum();
        for j in 0..t {
            let a = (sc[j] - mx).exp() / den;
            for e in 0..c.d_head {
                z[i][e] += a * v[j][e];
            }
        }
    }
    outs.push(affine(&z, l.wo.data(), None, d));

    let m_in = add(&view(&outs, 0, 2), &view(&outs, 1, 2));
    let hid: Mat = affine(&norm(&m_in, l.ln2_g.data(), l.ln2_b.data()), l.w1.data(), Some(l.b1.data()), c.d_mlp)
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh()))
                .collect()
        })
        .collect();
    outs.push(affine(&hid, l.w2.data(), Some(l.b2.data()), d));

    let o_in = add(&add(&view(&outs, 0, 3), &view(&outs, 1, 3)), &view(&outs, 2, 3));
    let f = norm(&o_in, p.lnf_g.data(), p.lnf_b.data());
    let pooled: Vec<Vec<f64>> = vec![(0..d).map(|j| f.iter().map(|r| r[j]).sum::<f64>() / t as f64).collect()];
    let logits = affine(&pooled, p.head_w.data(), Some(p.head_b.data()), c.n_classes).remove(0);
    (outs, logits)
}

pub fn ref_kl(p: &[f64], q: &[f64]) -> f64 {
    let sm = |z: &[f64]| {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (p, q) = (sm(p), sm(q));
    p.iter().zip(&q).map(|(a, b)| a * (a.max(1e-12).ln() - b.max(1e-12).ln())).sum()
}

/// Per-edge ablation weights of a one-block, one-head model computed with
/// the reference forward pass, in canonical edge order.
pub fn reference_exact_weights(m: &ViTModel, data: &Dataset) -> Vec<f64> {
    let none = [[false; 4]; 3];
    let images: Vec<Vec<f64>> = (0..data.len()).map(|i| data.image_f64(i)).collect();
    let clean: Vec<(Vec<Mat>, Vec<f64>)> = images.iter().map(|x| reference(m, x, &none, &[])).collect();
    let means: Vec<Mat> = (0..3)
        .map(|u| {
            let mut acc = clean[0].0[u].clone();
            for (o, _) in &clean[1..] {
                acc = add(&acc, &o[u]);
            }
            acc.iter().map(|r| r.iter().map(|v| v / images.len() as f64).collect()).collect()
        })
        .collect();
    [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        .iter()
        .map(|&(u, v)| {
            let mut mask = none;
            mask[u][v] = true;
            images
                .iter()
                .zip(&clean)
                .map(|(x, (_, z))| ref_kl(&reference(m, x, &mask, &means).1, z))
                .sum::<f64>()
                / images.len() as f64
        })
        .collect()
}

pub fn loss_of(m: &ViTModel, batch: &Tensor, loss: &LossSpec) -> f64 {
    backward(m, batch, loss).unwrap().loss
}

/// `|a − f| / max(|a|, |f|, 1e-6)`: relative error with an absolute floor
/// for gradients that are numerically zero.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter.
pub fn gradient_error(m: &ViTModel, batch: &Tensor, loss: &LossSpec) -> f64 {
    let g = backward(m, batch, loss).unwrap();
    let names = Params::tensor_names(m.config.n_layers);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for ti in 0..names.len() {
        let n = g.params.tensors()[ti].len();
        for j in 0..n {
            let mut plus = m.clone();
            plus.params.tensors_mut()[ti].data_mut()[j] += h;
            let mut minus = m.clone();
            minus.params.tensors_mut()[ti].data_mut()[j] -= h;
            let fd = (loss_of(&plus, batch, loss) - loss_of(&minus, batch, loss)) / (2.0 * h);
            let an = g.params.tensors()[ti].data()[j];
            let e = rel_err(an, fd);
            worst = worst.max(e);
        }
    }
    worst
}
