use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::data::SyntheticSample;
use super::model::ToyModel;
use super::nn::{backward_impl, cross_entropy, forward_impl, Hooks};
use crate::error::{bail, Error, Result};
use crate::tensor::Rng;

/// Adam over minibatches drawn with replacement from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f32>,
    /// Samples used to measure the initial and final loss.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            eval_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f32,
    pub final_loss: f32,
    /// Mean minibatch loss of every step.
    pub step_losses: Vec<f32>,
}

fn mean_loss(model: &ToyModel, data: &[SyntheticSample]) -> f32 {
    let mut total = 0.0f64;
    for s in data {
        let c = forward_impl(model.config(), &model.offsets, &model.params, &s.ids(), Hooks::default());
        total += cross_entropy(&c.logits, model.config().vocab, &s.loss_targets()) as f64;
    }
    (total / data.len() as f64) as f32
}

/// Trains a copy of `model`. Per-sample gradients are reduced in batch order,
/// so a fixed seed reproduces the final parameters bit for bit.
pub fn train(
    model: &ToyModel,
    dataset: &[SyntheticSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ToyModel, TrainReport)> {
    if dataset.is_empty() {
        bail!(Config, "empty training set");
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        bail!(Config, "batch size and learning rate must be positive");
    }
    for s in dataset {
        model.check_targets(&s.ids(), &s.loss_targets())?;
    }
    let probe = &dataset[..cfg.eval_samples.clamp(1, dataset.len())];
    let mut model = model.clone();
    let initial_loss = mean_loss(&model, probe);
    let n = model.params.len();
    let (mut m, mut v) = (alloc::vec![0.0f32; n], alloc::vec![0.0f32; n]);
    let mut grad = alloc::vec![0.0f32; n];
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mcfg = *model.config();
    let inv_b = 1.0 / cfg.batch_size as f32;
    // beta^t, kept as running products for bias correction
    let (mut pow1, mut pow2) = (1.0f32, 1.0f32);

    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0f64;
        for _ in 0..cfg.batch_size {
            let s = &dataset[rng.below(dataset.len())];
            let ids = s.ids();
            let targets = s.loss_targets();
            let cache = forward_impl(&mcfg, &model.offsets, &model.params, &ids, Hooks::default());
            batch_loss += cross_entropy(&cache.logits, mcfg.vocab, &targets) as f64;
            let g = backward_impl(&mcfg, &model.offsets, &model.params, &cache, &targets);
            for (acc, gi) in grad.iter_mut().zip(&g.params) {
                *acc += gi;
            }
        }
        let loss = (batch_loss / cfg.batch_size as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        step_losses.push(loss);

        let mut scale = inv_b;
        if let Some(clip) = cfg.clip_norm {
            let norm: f64 = grad.iter().map(|g| (g * inv_b) as f64 * (g * inv_b) as f64).sum::<f64>();
            let norm = libm::sqrt(norm) as f32;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        pow1 *= cfg.beta1;
        pow2 *= cfg.beta2;
        let (bc1, bc2) = (1.0 - pow1, 1.0 - pow2);
        for i in 0..n {
            let g = grad[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            model.params[i] -= cfg.lr * mh / (libm::sqrtf(vh) + cfg.eps);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
    }
    let final_loss = mean_loss(&model, probe);
    Ok((model, TrainReport { initial_loss, final_loss, step_losses }))
}
