//! Per-layer modality sensitivity: mean absolute output gradient over vision
//! rows and over language rows.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::data::SyntheticSample;
use super::model::{LinearId, ToyModel};
use super::nn::Grads;
use crate::error::{bail, Result};
use crate::tensor::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: LinearId,
    pub g_vision: f64,
    pub g_language: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub layers: Vec<LayerSensitivity>,
}

impl SensitivityProfile {
    pub fn get(&self, id: LinearId) -> Option<&LayerSensitivity> {
        self.layers.iter().find(|l| l.layer == id)
    }

    /// Same `(ḡ_v, ḡ_l)` for every listed layer.
    pub fn uniform(layers: impl IntoIterator<Item = LinearId>, g_vision: f64, g_language: f64) -> Self {
        Self { layers: layers.into_iter().map(|layer| LayerSensitivity { layer, g_vision, g_language }).collect() }
    }

    /// Every entry multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSensitivity { g_vision: l.g_vision * k, g_language: l.g_language * k, ..*l })
                .collect(),
        }
    }

    /// Mean of `(ḡ_v, ḡ_l)` over the layers of one block.
    pub fn block_mean(&self, block: usize) -> Option<(f64, f64)> {
        let ls: Vec<_> = self.layers.iter().filter(|l| l.layer.block == block).collect();
        if ls.is_empty() {
            return None;
        }
        let n = ls.len() as f64;
        Some((ls.iter().map(|l| l.g_vision).sum::<f64>() / n, ls.iter().map(|l| l.g_language).sum::<f64>() / n))
    }
}

/// Which positions the loss reads while profiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMask {
    /// SFT loss on language targets only.
    LanguageTargets,
    /// Next-token loss on every position, vision included.
    AllPositions,
}

/// Streams per-sample output gradients into per-layer modality means:
/// element mean within each sample first, then mean over samples.
#[derive(Debug, Clone)]
pub struct SensitivityAccumulator {
    layers: Vec<LinearId>,
    sum_v: Vec<f64>,
    sum_l: Vec<f64>,
    n_v: usize,
    n_l: usize,
}

impl SensitivityAccumulator {
    pub fn new(layers: Vec<LinearId>) -> Self {
        let n = layers.len();
        Self { layers, sum_v: alloc::vec![0.0; n], sum_l: alloc::vec![0.0; n], n_v: 0, n_l: 0 }
    }

    /// `grads[i]` is the `rows × cols` output gradient of `layers[i]` for one
    /// sample whose rows are tagged by `tags`.
    pub fn add_sample(&mut self, tags: &[Modality], grads: &[&[f32]]) -> Result<()> {
        if grads.len() != self.layers.len() {
            bail!(Shape, "{} gradient buffers for {} layers", grads.len(), self.layers.len());
        }
        let rows = tags.len();
        let nv = tags.iter().filter(|t| **t == Modality::Vision).count();
        let nl = rows - nv;
        for (i, g) in grads.iter().enumerate() {
            if rows == 0 || g.len() % rows != 0 {
                bail!(Shape, "gradient of {} values for {} rows", g.len(), rows);
            }
            let cols = g.len() / rows;
            let (mut sv, mut sl) = (0.0f64, 0.0f64);
            for (r, tag) in tags.iter().enumerate() {
                let s: f64 = g[r * cols..(r + 1) * cols].iter().map(|v| v.abs() as f64).sum();
                match tag {
                    Modality::Vision => sv += s,
                    Modality::Language => sl += s,
                }
            }
            if nv > 0 {
                self.sum_v[i] += sv / (nv * cols) as f64;
            }
            if nl > 0 {
                self.sum_l[i] += sl / (nl * cols) as f64;
            }
        }
        self.n_v += (nv > 0) as usize;
        self.n_l += (nl > 0) as usize;
        Ok(())
    }

    pub fn finish(self) -> SensitivityProfile {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        SensitivityProfile {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, &layer)| LayerSensitivity {
                    layer,
                    g_vision: mean(self.sum_v[i], self.n_v),
                    g_language: mean(self.sum_l[i], self.n_l),
                })
                .collect(),
        }
    }
}

fn sample_grads(model: &ToyModel, s: &SyntheticSample, mask: LossMask) -> Result<Grads<f32>> {
    let targets = match mask {
        LossMask::LanguageTargets => s.loss_targets(),
        LossMask::AllPositions => s.all_position_targets(),
    };
    if targets.is_empty() {
        bail!(Domain, "sample without loss targets");
    }
    Ok(model.loss_and_grads(&s.ids(), &targets)?.2)
}

pub fn sensitivity_profile(model: &ToyModel, dataset: &[SyntheticSample]) -> Result<SensitivityProfile> {
    sensitivity_profile_with(model, dataset, LossMask::LanguageTargets)
}

/// Per-layer `(ḡ_v, ḡ_l)` of the FP model on `dataset`.
pub fn sensitivity_profile_with(
    model: &ToyModel,
    dataset: &[SyntheticSample],
    mask: LossMask,
) -> Result<SensitivityProfile> {
    if dataset.is_empty() {
        bail!(Domain, "empty profiling set");
    }
    let layers: Vec<LinearId> = model.config().linear_ids().collect();
    let mut acc = SensitivityAccumulator::new(layers.clone());
    for s in dataset {
        let g = sample_grads(model, s, mask)?;
        let bufs: Vec<&[f32]> = layers.iter().map(|l| g.linear_out[l.index()].as_slice()).collect();
        acc.add_sample(&s.tags(), &bufs)?;
    }
    Ok(acc.finish())
}

/// Per-token mean `|∂L/∂Y_t|` for one layer, tokens in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGradWeights {
    pub layer: LinearId,
    pub weights: Vec<f64>,
    pub tags: Vec<Modality>,
}

impl TokenGradWeights {
    /// Row means of `|g|` for a `rows × cols` gradient.
    pub fn row_means(g: &[f32], rows: usize) -> Vec<f64> {
        if rows == 0 {
            return Vec::new();
        }
        let cols = g.len() / rows;
        g.chunks_exact(cols.max(1))
            .map(|r| r.iter().map(|v| v.abs() as f64).sum::<f64>() / cols as f64)
            .collect()
    }
}

pub fn token_grad_weights(model: &ToyModel, dataset: &[SyntheticSample], layer: LinearId) -> Result<TokenGradWeights> {
    if layer.block >= model.config().n_blocks {
        bail!(Config, "no layer {}", layer);
    }
    let mut weights = Vec::new();
    let mut tags = Vec::new();
    for s in dataset {
        let g = sample_grads(model, s, LossMask::LanguageTargets)?;
        weights.extend(TokenGradWeights::row_means(&g.linear_out[layer.index()], s.len()));
        tags.extend(s.tags());
    }
    Ok(TokenGradWeights { layer, weights, tags })
}

/// [`token_grad_weights`] for every linear layer from one backward pass per sample.
pub fn token_grad_weights_all(model: &ToyModel, dataset: &[SyntheticSample]) -> Result<Vec<TokenGradWeights>> {
    let layers: Vec<LinearId> = model.config().linear_ids().collect();
    let mut out: Vec<TokenGradWeights> =
        layers.iter().map(|&layer| TokenGradWeights { layer, weights: Vec::new(), tags: Vec::new() }).collect();
    for s in dataset {
        let g = sample_grads(model, s, LossMask::LanguageTargets)?;
        let tags = s.tags();
        for (o, l) in out.iter_mut().zip(&layers) {
            o.weights.extend(TokenGradWeights::row_means(&g.linear_out[l.index()], s.len()));
            o.tags.extend_from_slice(&tags);
        }
    }
    Ok(out)
}
