//! Miniature vision-language decoder used to generate calibration data and
//! modality sensitivity profiles.

mod data;
mod model;
mod nn;
mod sensitivity;
mod train;

use alloc::vec::Vec;

pub use data::{
    decode_key, gen_data, make_sample, validate_sample, Key, KeySplit, SyntheticSample, TaskConfig, BOS, N_TARGETS,
};
pub use model::{param_entries, LinearId, LinearKind, ModelConfig, ParamEntry, ToyModel};
pub use nn::{all_targets_argmax, cross_entropy, ForwardCache, Grads, InputTransform, Perturbation, Real};
pub use sensitivity::{
    sensitivity_profile, sensitivity_profile_with, token_grad_weights, token_grad_weights_all, LayerSensitivity, LossMask,
    SensitivityAccumulator, SensitivityProfile, TokenGradWeights,
};
pub use train::{train, TrainConfig, TrainReport};

use crate::error::{bail, Result};
use crate::tensor::Matrix;
use nn::{backward_impl, forward_impl, Hooks};

impl ToyModel {
    fn check_ids(&self, ids: &[u16]) -> Result<()> {
        let cfg = self.config();
        if ids.is_empty() {
            bail!(Domain, "empty sequence");
        }
        if ids.len() > cfg.max_seq {
            bail!(Domain, "sequence of {} exceeds max_seq {}", ids.len(), cfg.max_seq);
        }
        if let Some(id) = ids.iter().find(|id| **id as usize >= cfg.vocab) {
            bail!(Domain, "token id {} outside vocabulary of {}", id, cfg.vocab);
        }
        Ok(())
    }

    /// Causal forward pass; the cache holds every linear layer's input and output.
    pub fn forward(&self, ids: &[u16]) -> Result<ForwardCache<f32>> {
        self.check_ids(ids)?;
        Ok(forward_impl(self.config(), &self.offsets, &self.params, ids, Hooks::default()))
    }

    /// Forward pass with per-layer input rewrites (equalization and activation
    /// quantization of a quantized model). `transforms` is indexed by
    /// [`LinearId::index`].
    pub fn forward_with(&self, ids: &[u16], transforms: &[Option<InputTransform>]) -> Result<ForwardCache<f32>> {
        self.check_ids(ids)?;
        if transforms.len() != self.config().n_linear() {
            bail!(Shape, "{} transforms for {} linear layers", transforms.len(), self.config().n_linear());
        }
        for (i, t) in transforms.iter().enumerate() {
            if let Some(t) = t {
                let (_, din) = self.config().linear_shape(LinearId::from_index(i).kind);
                if t.inv_scale.len() != din {
                    bail!(Shape, "transform {} has {} factors for {} inputs", i, t.inv_scale.len(), din);
                }
                if let Some(spec) = &t.act_spec {
                    spec.validate()?;
                }
            }
        }
        let hooks = Hooks { transforms: Some(transforms), perturb: None };
        Ok(forward_impl(self.config(), &self.offsets, &self.params, ids, hooks))
    }

    /// Loss and full reverse-mode gradients for arbitrary `(position, target)` pairs.
    pub fn loss_and_grads(&self, ids: &[u16], targets: &[(usize, u16)]) -> Result<(f32, ForwardCache<f32>, Grads<f32>)> {
        self.check_targets(ids, targets)?;
        let cache = self.forward(ids)?;
        let loss = cross_entropy(&cache.logits, self.config().vocab, targets);
        let grads = backward_impl(self.config(), &self.offsets, &self.params, &cache, targets);
        Ok((loss, cache, grads))
    }

    /// The sample's SFT loss and gradients (language target positions only).
    pub fn backward(&self, sample: &SyntheticSample) -> Result<(f32, Grads<f32>)> {
        let (loss, _, g) = self.loss_and_grads(&sample.ids(), &sample.loss_targets())?;
        Ok((loss, g))
    }

    fn check_targets(&self, ids: &[u16], targets: &[(usize, u16)]) -> Result<()> {
        self.check_ids(ids)?;
        if targets.is_empty() {
            bail!(Domain, "no unmasked loss positions");
        }
        if targets.iter().any(|(p, t)| *p >= ids.len() || *t as usize >= self.config().vocab) {
            bail!(Domain, "loss target outside sequence or vocabulary");
        }
        Ok(())
    }

    /// Loss recomputed in `f64` from the same parameters, optionally with
    /// replaced parameters and a perturbation on one linear output.
    pub fn loss_f64(
        &self,
        params: &[f64],
        ids: &[u16],
        targets: &[(usize, u16)],
        perturb: Option<Perturbation>,
    ) -> Result<f64> {
        self.check_targets(ids, targets)?;
        if params.len() != self.params.len() {
            bail!(Shape, "{} parameters for a model of {}", params.len(), self.params.len());
        }
        let hooks = Hooks { transforms: None, perturb };
        let cache = forward_impl(self.config(), &self.offsets, params, ids, hooks);
        Ok(cross_entropy(&cache.logits, self.config().vocab, targets))
    }

    /// Analytic gradients through the `f64` instantiation of the backward pass.
    pub fn grads_f64(&self, ids: &[u16], targets: &[(usize, u16)]) -> Result<(f64, Grads<f64>)> {
        self.check_targets(ids, targets)?;
        let p: Vec<f64> = self.params_as();
        let cache = forward_impl(self.config(), &self.offsets, &p, ids, Hooks::default());
        let loss = cross_entropy(&cache.logits, self.config().vocab, targets);
        Ok((loss, backward_impl(self.config(), &self.offsets, &p, &cache, targets)))
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params_as()
    }
}

/// Mean cross-entropy of `logits` (`n × vocab`) over the sample's target positions.
pub fn sft_loss(logits: &Matrix, sample: &SyntheticSample) -> Result<f32> {
    let targets = sample.loss_targets();
    if targets.is_empty() {
        bail!(Domain, "sample has no unmasked loss positions");
    }
    if logits.rows() < sample.len() {
        bail!(Shape, "{} logit rows for a sample of {}", logits.rows(), sample.len());
    }
    if let Some((_, t)) = targets.iter().find(|(_, t)| *t as usize >= logits.cols()) {
        bail!(Shape, "target {} outside {} logits", t, logits.cols());
    }
    Ok(cross_entropy(logits.data(), logits.cols(), &targets))
}

/// Teacher-forced loss and greedy exact-match rate over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskScore {
    pub loss: f64,
    pub exact_match: f64,
}

/// Scores `model` (optionally with per-layer input rewrites) on `dataset`.
/// Per-sample losses are summed in dataset order in `f64`.
pub fn eval_task(model: &ToyModel, transforms: Option<&[Option<InputTransform>]>, dataset: &[SyntheticSample]) -> Result<TaskScore> {
    if dataset.is_empty() {
        bail!(Config, "empty evaluation set");
    }
    let vocab = model.config().vocab;
    let (mut loss, mut hits) = (0.0f64, 0usize);
    for s in dataset {
        let ids = s.ids();
        let cache = match transforms {
            Some(t) => model.forward_with(&ids, t)?,
            None => model.forward(&ids)?,
        };
        let targets = s.loss_targets();
        loss += cross_entropy(&cache.logits, vocab, &targets) as f64;
        hits += all_targets_argmax(&cache.logits, vocab, &targets) as usize;
    }
    let n = dataset.len() as f64;
    Ok(TaskScore { loss: loss / n, exact_match: hits as f64 / n })
}
