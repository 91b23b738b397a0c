//! A small pre-norm vision transformer with reverse-mode gradients.
//!
//! The model reads non-overlapping image patches, runs `n_layers` blocks of
//! multi-head attention plus an MLP, mean-pools the patch tokens and applies a
//! linear classifier. Attention heads have no biases, so every head's
//! contribution to the residual stream is a separate term, which is what the
//! circuit graph needs.

mod backward;
mod forward;
mod io;
mod loss;
mod train;

pub use backward::{backward, GradientBundle, LossSpec};
pub(crate) use backward::backward_sample;
pub use forward::{forward, forward_with, ActivationTrace, Intervention, SampleForward};
pub(crate) use forward::forward_sample;
pub(crate) use train::argmax;
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use loss::{cross_entropy, kl_divergence, kl_logits, log_softmax, KL_PROB_FLOOR};
pub use train::{evaluate_accuracy, predict_logits, train, train_with_snapshots, EpochStats, TrainConfig, MOMENTUM};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_side: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_classes: usize,
    /// Replace layer norm by its affine part, attention by uniform mixing and
    /// GELU by the identity. The resulting model is affine in every node
    /// input; used to check gradient attributions against exact ablation.
    #[serde(default)]
    pub linear: bool,
}

impl ModelConfig {
    /// 16×16×3 images, 4×4 patches, 4 blocks of 2 heads, 4 classes.
    pub fn desk() -> Self {
        Self {
            image_side: 16,
            channels: 3,
            patch_side: 4,
            n_layers: 4,
            n_heads: 2,
            d_model: 32,
            d_head: 16,
            d_mlp: 64,
            n_classes: 4,
            linear: false,
        }
    }

    /// Very small configuration for unit tests.
    pub fn tiny() -> Self {
        Self {
            image_side: 4,
            channels: 1,
            patch_side: 2,
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_head: 4,
            d_mlp: 6,
            n_classes: 3,
            linear: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.image_side,
            self.channels,
            self.patch_side,
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.n_classes,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_head ({}) × n_heads ({}) must equal d_model ({})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn tokens(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_side * self.image_side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    /// `[H, d_model, d_head]`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[H, d_head, d_model]`
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    /// `[d_model, d_mlp]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[d_mlp, d_model]`
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `[patch_dim, d_model]`
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    /// `[tokens, d_model]`
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// `[d_model, n_classes]`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, dh, h, dm) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp);
        let layer = LayerParams {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[h, d, dh]),
            wk: Tensor::zeros(&[h, d, dh]),
            wv: Tensor::zeros(&[h, d, dh]),
            wo: Tensor::zeros(&[h, dh, d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, dm]),
            b1: Tensor::zeros(&[dm]),
            w2: Tensor::zeros(&[dm, d]),
            b2: Tensor::zeros(&[d]),
        };
        Self {
            patch_w: Tensor::zeros(&[cfg.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[cfg.tokens(), d]),
            layers: vec![layer; cfg.n_layers],
            lnf_g: Tensor::zeros(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, cfg.n_classes]),
            head_b: Tensor::zeros(&[cfg.n_classes]),
        }
    }

    /// Tensors in declaration order (the on-disk order).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.pos];
        for l in &self.layers {
            v.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1,
                &l.w2, &l.b2,
            ]);
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for l in &mut self.layers {
            v.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        v.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    /// Names parallel to [`Params::tensors`].
    pub fn tensor_names(n_layers: usize) -> Vec<String> {
        let mut v: Vec<String> = ["patch_w", "patch_b", "pos"].iter().map(|s| s.to_string()).collect();
        for l in 1..=n_layers {
            for n in ["ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"] {
                v.push(format!("layer{l}.{n}"));
            }
        }
        v.extend(["lnf_g", "lnf_b", "head_w", "head_b"].iter().map(|s| s.to_string()));
        v
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::tensor::add_assign(a.data_mut(), b.data());
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    pub id: String,
    pub config: ModelConfig,
    pub params: Params,
}

impl ViTModel {
    /// Gaussian initialisation scaled by fan-in; layer-norm gains start at 1.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, id: impl Into<String>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let (d, dh, dm) = (config.d_model as f64, config.d_head as f64, config.d_mlp as f64);
        let mut fill = |t: &mut Tensor, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
        };
        fill(&mut params.patch_w, 1.0 / (config.patch_dim() as f64).sqrt());
        fill(&mut params.pos, 0.1);
        for l in &mut params.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(&mut l.wq, 1.0 / d.sqrt());
            fill(&mut l.wk, 1.0 / d.sqrt());
            fill(&mut l.wv, 1.0 / d.sqrt());
            fill(&mut l.wo, 1.0 / (dh * config.n_heads as f64).sqrt());
            fill(&mut l.w1, 1.0 / d.sqrt());
            fill(&mut l.w2, 1.0 / dm.sqrt());
        }
        params.lnf_g.fill(1.0);
        fill(&mut params.head_w, 1.0 / d.sqrt());
        Ok(Self {
            id: id.into(),
            config,
            params,
        })
    }

    /// All parameters zero except layer-norm gains (which are 1).
    pub fn zeroed(config: ModelConfig, id: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        for l in &mut params.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
        }
        params.lnf_g.fill(1.0);
        Ok(Self {
            id: id.into(),
            config,
            params,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Params::zeros(&self.config);
        if self.params.layers.len() != self.config.n_layers {
            return Err(Error::Config("layer count does not match configuration".into()));
        }
        for (name, (a, b)) in Params::tensor_names(self.config.n_layers)
            .iter()
            .zip(self.params.tensors().into_iter().zip(reference.tensors()))
        {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if !self.params.all_finite() {
            return Err(Error::Config("model has non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Cuts an image `[c, s, s]` into `[tokens, patch_dim]` rows. Token `t` is
/// patch `(t / per_side, t % per_side)`; features are channel-major.
pub(crate) fn patchify(cfg: &ModelConfig, image: &[f64]) -> Vec<f64> {
    let (s, p, c) = (cfg.image_side, cfg.patch_side, cfg.channels);
    let per = cfg.patches_per_side();
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; cfg.tokens() * pd];
    for py in 0..per {
        for px in 0..per {
            let t = py * per + px;
            for ch in 0..c {
                for iy in 0..p {
                    for ix in 0..p {
                        let y = py * p + iy;
                        let x = px * p + ix;
                        out[t * pd + ch * p * p + iy * p + ix] = image[ch * s * s + y * s + x];
                    }
                }
            }
        }
    }
    out
}
