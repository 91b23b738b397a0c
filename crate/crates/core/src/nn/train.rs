use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::backward_sample;
use super::forward::{forward_sample, Intervention};
use super::loss::cross_entropy;
use super::{Params, ViTModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NodeLayout;
use crate::par;
use crate::tensor::Tensor;

/// Momentum coefficient of the SGD optimiser.
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy on the training samples, measured before each update.
    pub id_acc: f64,
}

/// Trains a copy of `model` with momentum SGD on cross-entropy.
pub fn train(model: &ViTModel, data: &Dataset, cfg: &TrainConfig) -> Result<(ViTModel, Vec<EpochStats>)> {
    let (m, h, _) = train_with_snapshots(model, data, cfg, 0)?;
    Ok((m, h))
}

/// As [`train`], also returning a copy of the model every `snapshot_every`
/// optimiser steps (and at step 0). `snapshot_every == 0` disables snapshots.
pub fn train_with_snapshots(
    model: &ViTModel,
    data: &Dataset,
    cfg: &TrainConfig,
    snapshot_every: usize,
) -> Result<(ViTModel, Vec<EpochStats>, Vec<(usize, ViTModel)>)> {
    cfg.validate()?;
    model.validate()?;
    let mc = &model.config;
    if data.sample_len() != mc.image_len() {
        return Err(Error::arg("dataset images do not match the model input shape"));
    }
    if data.labels.iter().any(|&l| l as usize >= mc.n_classes) {
        return Err(Error::arg("dataset labels must lie in [0, n_classes)"));
    }
    let mut model = model.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    if cfg.epochs == 0 {
        return Ok((model, history, snapshots));
    }
    if data.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Params::zeros(mc);
    let iv = Intervention::none(NodeLayout::new(mc).count());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    if snapshot_every > 0 {
        snapshots.push((0, model.clone()));
    }
    let mut last_good = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let nb = batch.len() as f64;
            let results: Vec<Result<(f64, bool, Params)>> = par::map_slice(batch, |&i| {
                let x = data.image_f64(i);
                let fwd = forward_sample(&model, &x, &iv)?;
                let label = data.labels[i] as usize;
                let (l, mut g) = cross_entropy(&fwd.logits, label);
                let hit = argmax(&fwd.logits) == label;
                g.iter_mut().for_each(|v| *v /= nb);
                let mut grads = Params::zeros(mc);
                backward_sample(&model, &fwd, &iv, &g, Some(&mut grads));
                Ok((l, hit, grads))
            });
            let mut grad = Params::zeros(mc);
            for r in results {
                let (l, hit, g) = r?;
                loss_sum += l;
                correct += hit as usize;
                grad.add_assign(&g);
            }
            if !loss_sum.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good_epoch: last_good,
                });
            }
            sgd_step(&mut model.params, &mut velocity, &grad, cfg);
            step += 1;
            if snapshot_every > 0 && step % snapshot_every == 0 {
                snapshots.push((step, model.clone()));
            }
        }
        if !model.params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                last_good_epoch: last_good,
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            id_acc: correct as f64 / data.len() as f64,
        });
        last_good = Some(epoch);
    }
    Ok((model, history, snapshots))
}

fn sgd_step(params: &mut Params, velocity: &mut Params, grad: &Params, cfg: &TrainConfig) {
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grad.tensors())
    {
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = MOMENTUM * *vi + gi + cfg.weight_decay * *pi;
            *pi -= cfg.learning_rate * *vi;
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Clean logits `[n, n_classes]` for every sample of `data`.
pub fn predict_logits(model: &ViTModel, data: &Dataset) -> Result<Tensor> {
    let iv = Intervention::none(NodeLayout::new(&model.config).count());
    let rows: Vec<Vec<f64>> = par::map_range(data.len(), |i| {
        forward_sample(model, &data.image_f64(i), &iv).map(|f| f.logits)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Tensor::new(
        vec![data.len(), model.config.n_classes],
        rows.into_iter().flatten().collect(),
    )
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate_accuracy(model: &ViTModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let logits = predict_logits(model, data)?;
    let hits = (0..data.len())
        .filter(|&i| argmax(logits.row(i)) == data.labels[i] as usize)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
