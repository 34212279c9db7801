//! Channel-wise equalization search.
//!
//! A layer `Y = X Wᵀ` is rewritten as `(X ⊙ E⁻¹)(W ⊙ E)ᵀ` with one factor per
//! input channel, then quantized. The search scores a fixed family of
//! candidate `E` vectors against a reconstruction objective and keeps the best.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::quant::{fake_quant, QuantSpec};
use crate::tensor::{Matrix, ModalBatch, Modality, Rng};

const STAT_FLOOR: f64 = 1e-8;

/// Vision weight used by the balanced CWE objective unless configured otherwise.
pub const DEFAULT_VISION_FACTOR: f64 = 0.1;

/// Per-input-channel factors `E`, all strictly positive and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizationVector {
    factors: Vec<f32>,
}

impl EqualizationVector {
    pub fn new(factors: Vec<f32>) -> Result<Self> {
        if let Some(f) = factors.iter().find(|f| !(**f > 0.0) || !f.is_finite()) {
            bail!(Domain, "equalization factor {} must be positive and finite", f);
        }
        Ok(Self { factors })
    }

    pub fn identity(n: usize) -> Self {
        Self { factors: alloc::vec![1.0; n] }
    }

    pub fn factors(&self) -> &[f32] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// `1 / E`, applied to the activations.
    pub fn inverse(&self) -> Vec<f32> {
        self.factors.iter().map(|f| 1.0 / f).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(|f| *f == 1.0)
    }
}

/// Mean `|x|` per input channel over tokens and mean `|w|` per input channel
/// over output rows, floored at `1e-8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub act: Vec<f64>,
    pub weight: Vec<f64>,
}

pub fn channel_stats(x: &ModalBatch, w: &Matrix) -> Result<ChannelStats> {
    let cols = w.cols();
    if x.tokens().cols() != cols {
        bail!(Shape, "activations have {} channels, weight has {}", x.tokens().cols(), cols);
    }
    let col_means = |m: &Matrix| {
        let mut s = alloc::vec![0.0f64; cols];
        for row in m.row_iter() {
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += v.abs() as f64;
            }
        }
        let n = m.rows().max(1) as f64;
        s.into_iter().map(|v| (v / n).max(STAT_FLOOR)).collect::<Vec<_>>()
    };
    Ok(ChannelStats { act: col_means(x.tokens()), weight: col_means(w) })
}

/// `E_c = act_c^α / weight_c^(1−α)`, rescaled to geometric mean 1.
pub fn candidate_equalization(stats: &ChannelStats, alpha: f64) -> Result<EqualizationVector> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Domain, "alpha {} outside [0, 1]", alpha);
    }
    if stats.act.len() != stats.weight.len() {
        bail!(Shape, "{} activation stats for {} weight stats", stats.act.len(), stats.weight.len());
    }
    if stats.act.is_empty() {
        return Ok(EqualizationVector::identity(0));
    }
    let logs: Vec<f64> = stats
        .act
        .iter()
        .zip(&stats.weight)
        .map(|(a, w)| alpha * libm::log(*a) - (1.0 - alpha) * libm::log(*w))
        .collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    EqualizationVector::new(logs.iter().map(|l| libm::exp(l - mean) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    CweMse,
    BalancedCwe { vision_factor: f64 },
    MbqMse,
    MbqMae,
    RandomSplit,
    TokenWise,
}

impl ObjectiveKind {
    pub fn balanced() -> Self {
        Self::BalancedCwe { vision_factor: DEFAULT_VISION_FACTOR }
    }

    pub fn needs_sensitivity(self) -> bool {
        matches!(self, Self::MbqMse | Self::MbqMae | Self::RandomSplit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibMode {
    WeightOnly,
    WeightActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibObjective {
    pub kind: ObjectiveKind,
    pub mode: CalibMode,
}

/// Weight spec plus the per-token activation spec used in weight-activation mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSpecs {
    pub weight: QuantSpec,
    pub act: Option<QuantSpec>,
}

impl CalibSpecs {
    fn act_for(&self, mode: CalibMode) -> Result<Option<QuantSpec>> {
        match (mode, self.act) {
            (CalibMode::WeightOnly, _) => Ok(None),
            (CalibMode::WeightActivation, Some(a)) => {
                a.validate()?;
                Ok(Some(a))
            }
            (CalibMode::WeightActivation, None) => bail!(Config, "weight-activation mode needs an activation spec"),
        }
    }
}

/// Modality weights `(ḡ_v, ḡ_l)` of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalWeights {
    pub vision: f64,
    pub language: f64,
}

impl ModalWeights {
    pub fn new(vision: f64, language: f64) -> Result<Self> {
        if !(vision >= 0.0 && language >= 0.0 && vision.is_finite() && language.is_finite()) {
            bail!(Domain, "modality weights ({}, {}) must be nonnegative and finite", vision, language);
        }
        Ok(Self { vision, language })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Candidate {
    /// `E = 1`: plain round-to-nearest.
    Identity,
    Alpha(f64),
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Candidate::Identity => f.write_str("identity"),
            Candidate::Alpha(a) => write!(f, "{:.2}", a),
        }
    }
}

/// Candidates in tie-break order: identity first (when included), then alphas
/// in the listed (ascending) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub alphas: Vec<f64>,
    pub include_identity: bool,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self { alphas: (0..=20).map(|i| i as f64 * 0.05).collect(), include_identity: true }
    }
}

impl SearchGrid {
    pub fn alphas(alphas: Vec<f64>) -> Self {
        Self { alphas, include_identity: false }
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        let mut c = Vec::with_capacity(self.alphas.len() + 1);
        if self.include_identity {
            c.push(Candidate::Identity);
        }
        c.extend(self.alphas.iter().map(|a| Candidate::Alpha(*a)));
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() && !self.include_identity {
            bail!(Config, "empty search grid");
        }
        if self.alphas.windows(2).any(|w| !(w[0] < w[1])) {
            bail!(Config, "grid alphas must be strictly ascending");
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            bail!(Config, "grid alpha {} outside [0, 1]", a);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    pub e: EqualizationVector,
    pub chosen: Candidate,
    pub objective_value: f64,
    pub candidate_values: Vec<(Candidate, f64)>,
}

impl CalibResult {
    pub fn alpha(&self) -> Option<f64> {
        match self.chosen {
            Candidate::Identity => None,
            Candidate::Alpha(a) => Some(a),
        }
    }
}

/// Per-token output error of one candidate: `Σ_j |Δ_tj|` and `Σ_j Δ_tj²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenErrors {
    pub abs: Vec<f64>,
    pub sq: Vec<f64>,
}

fn token_errors(w: &Matrix, x: &Matrix, reference: &Matrix, e: &EqualizationVector, spec_w: &QuantSpec, spec_a: Option<&QuantSpec>) -> Result<TokenErrors> {
    let wq = fake_quant(&w.scale_cols(e.factors())?, &spec_w.fit_to(w.cols()))?;
    let y_hat = match spec_a {
        None => {
            // (X ⊙ E⁻¹)·Q(W ⊙ E)ᵀ = X·(Q(W ⊙ E) ⊙ E⁻¹)ᵀ
            x.matmul_t(&wq.scale_cols(&e.inverse())?)?
        }
        Some(sa) => {
            let xs = fake_quant(&x.scale_cols(&e.inverse())?, sa)?;
            xs.matmul_t(&wq)?
        }
    };
    let mut abs = Vec::with_capacity(x.rows());
    let mut sq = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let (mut a, mut s) = (0.0f64, 0.0f64);
        for (yh, y) in y_hat.row(t).iter().zip(reference.row(t)) {
            let d = *yh as f64 - *y as f64;
            a += d.abs();
            s += d * d;
        }
        abs.push(a);
        sq.push(s);
    }
    Ok(TokenErrors { abs, sq })
}

/// Quantization error of every candidate on one layer, computed once and
/// scored under any objective.
#[derive(Debug, Clone)]
pub struct ErrorTable {
    candidates: Vec<Candidate>,
    vectors: Vec<EqualizationVector>,
    errors: Vec<TokenErrors>,
    tags: Vec<Modality>,
    out_dim: usize,
}

impl ErrorTable {
    pub fn build(w: &Matrix, x: &ModalBatch, specs: &CalibSpecs, mode: CalibMode, grid: &SearchGrid) -> Result<Self> {
        grid.validate()?;
        specs.weight.validate()?;
        let spec_a = specs.act_for(mode)?;
        let stats = channel_stats(x, w)?;
        let reference = x.tokens().matmul_t(w)?;
        let candidates = grid.candidates();
        let mut vectors = Vec::with_capacity(candidates.len());
        let mut errors = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let e = match c {
                Candidate::Identity => EqualizationVector::identity(w.cols()),
                Candidate::Alpha(a) => candidate_equalization(&stats, *a)?,
            };
            errors.push(token_errors(w, x.tokens(), &reference, &e, &specs.weight, spec_a.as_ref())?);
            vectors.push(e);
        }
        Ok(Self { candidates, vectors, errors, tags: x.tags().to_vec(), out_dim: w.rows() })
    }

    /// A one-row table for a given `e`, scored exactly like a grid row.
    pub fn for_vector(w: &Matrix, x: &ModalBatch, specs: &CalibSpecs, mode: CalibMode, e: &EqualizationVector) -> Result<Self> {
        if e.len() != w.cols() {
            bail!(Shape, "{} equalization factors for {} input channels", e.len(), w.cols());
        }
        if x.tokens().cols() != w.cols() {
            bail!(Shape, "activations have {} channels, weight has {}", x.tokens().cols(), w.cols());
        }
        specs.weight.validate()?;
        let spec_a = specs.act_for(mode)?;
        let reference = x.tokens().matmul_t(w)?;
        let errors = token_errors(w, x.tokens(), &reference, e, &specs.weight, spec_a.as_ref())?;
        Ok(Self {
            candidates: alloc::vec![Candidate::Identity],
            vectors: alloc::vec![e.clone()],
            errors: alloc::vec![errors],
            tags: x.tags().to_vec(),
            out_dim: w.rows(),
        })
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn errors(&self, i: usize) -> &TokenErrors {
        &self.errors[i]
    }

    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    /// Per-modality element means of `per_token` over the given tags.
    fn modal_means(&self, per_token: &[f64], tags: &[Modality]) -> (f64, f64) {
        let (mut s, mut n) = ([0.0f64; 2], [0usize; 2]);
        for (v, t) in per_token.iter().zip(tags) {
            let k = (*t == Modality::Language) as usize;
            s[k] += v;
            n[k] += 1;
        }
        let mean = |k: usize| if n[k] == 0 { 0.0 } else { s[k] / (n[k] * self.out_dim.max(1)) as f64 };
        (mean(0), mean(1))
    }

    fn value(&self, i: usize, kind: ObjectiveKind, sens: Option<ModalWeights>, tags: &[Modality]) -> Result<f64> {
        let e = &self.errors[i];
        let need = || match sens {
            Some(s) => Ok(s),
            None => bail!(Config, "objective needs modality sensitivities"),
        };
        Ok(match kind {
            ObjectiveKind::CweMse => {
                let n = (e.sq.len() * self.out_dim).max(1) as f64;
                e.sq.iter().sum::<f64>() / n
            }
            ObjectiveKind::BalancedCwe { vision_factor } => {
                let (v, l) = self.modal_means(&e.sq, tags);
                l + vision_factor * v
            }
            ObjectiveKind::MbqMse => {
                let g = need()?;
                let (v, l) = self.modal_means(&e.sq, tags);
                g.language * l + g.vision * v
            }
            ObjectiveKind::MbqMae | ObjectiveKind::RandomSplit => {
                let g = need()?;
                let (v, l) = self.modal_means(&e.abs, tags);
                g.language * l + g.vision * v
            }
            ObjectiveKind::TokenWise => bail!(Config, "token-wise objective needs per-token weights"),
        })
    }

    /// Objective value of every candidate, in candidate order.
    pub fn values(&self, kind: ObjectiveKind, sens: Option<ModalWeights>) -> Result<Vec<f64>> {
        (0..self.candidates.len()).map(|i| self.value(i, kind, sens, &self.tags)).collect()
    }

    /// Values under the modality-weighted MAE with tokens relabeled by `tags`.
    pub fn values_relabeled(&self, sens: ModalWeights, tags: &[Modality]) -> Result<Vec<f64>> {
        if tags.len() != self.tags.len() {
            bail!(Shape, "{} labels for {} tokens", tags.len(), self.tags.len());
        }
        (0..self.candidates.len()).map(|i| self.value(i, ObjectiveKind::MbqMae, Some(sens), tags)).collect()
    }

    /// `Σ_m (1/n_m) Σ_{t∈m} w_t · MAE_t`: per-token weights, normalized within
    /// each modality so that modality-constant weights give the MBQ-MAE value.
    pub fn values_tokenwise(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.tags.len() {
            bail!(Shape, "{} token weights for {} tokens", weights.len(), self.tags.len());
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            bail!(Domain, "token weight {} must be nonnegative and finite", w);
        }
        let n_v = self.tags.iter().filter(|t| **t == Modality::Vision).count();
        let n_l = self.tags.len() - n_v;
        let d = self.out_dim.max(1) as f64;
        Ok(self
            .errors
            .iter()
            .map(|e| {
                let (mut v, mut l) = (0.0f64, 0.0f64);
                for ((a, w), t) in e.abs.iter().zip(weights).zip(&self.tags) {
                    match t {
                        Modality::Vision => v += w * a / d,
                        Modality::Language => l += w * a / d,
                    }
                }
                (if n_v > 0 { v / n_v as f64 } else { 0.0 }) + (if n_l > 0 { l / n_l as f64 } else { 0.0 })
            })
            .collect())
    }

    /// Argmin over `values` (candidate order); the first minimum wins.
    pub fn select(&self, values: Vec<f64>) -> Result<CalibResult> {
        if values.len() != self.candidates.len() {
            bail!(Shape, "{} values for {} candidates", values.len(), self.candidates.len());
        }
        let mut best = 0;
        for (i, v) in values.iter().enumerate() {
            if v.is_nan() {
                bail!(Domain, "objective of candidate {} is NaN", self.candidates[i]);
            }
            if *v < values[best] {
                best = i;
            }
        }
        Ok(CalibResult {
            e: self.vectors[best].clone(),
            chosen: self.candidates[best],
            objective_value: values[best],
            candidate_values: self.candidates.iter().copied().zip(values).collect(),
        })
    }

    pub fn vector(&self, i: usize) -> &EqualizationVector {
        &self.vectors[i]
    }
}

/// Objective value of one equalization `e`.
pub fn recon_loss(
    w: &Matrix,
    x: &ModalBatch,
    e: &EqualizationVector,
    specs: &CalibSpecs,
    objective: &CalibObjective,
    sens: Option<ModalWeights>,
) -> Result<f64> {
    let table = ErrorTable::for_vector(w, x, specs, objective.mode, e)?;
    Ok(table.values(objective.kind, sens)?[0])
}

/// Full grid search under one of the modality-level objectives.
pub fn search(
    w: &Matrix,
    x: &ModalBatch,
    specs: &CalibSpecs,
    objective: &CalibObjective,
    sens: Option<ModalWeights>,
    grid: &SearchGrid,
) -> Result<CalibResult> {
    if objective.kind.needs_sensitivity() && sens.is_none() {
        bail!(Config, "objective needs modality sensitivities");
    }
    let table = ErrorTable::build(w, x, specs, objective.mode, grid)?;
    match objective.kind {
        ObjectiveKind::TokenWise => bail!(Config, "token-wise search takes per-token weights"),
        kind => table.select(table.values(kind, sens)?),
    }
}

/// Two equal random halves of `n` tokens: the first gets the vision label.
pub fn random_halves(n: usize, rng: &mut Rng) -> Result<Vec<Modality>> {
    if n < 2 {
        bail!(Domain, "random split needs at least 2 tokens, got {}", n);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut tags = alloc::vec![Modality::Language; n];
    for &i in &idx[..n / 2] {
        tags[i] = Modality::Vision;
    }
    Ok(tags)
}

/// MBQ-MAE search over a random relabeling of the tokens into two halves.
pub fn ablation_random_split(
    w: &Matrix,
    x: &ModalBatch,
    specs: &CalibSpecs,
    mode: CalibMode,
    sens: ModalWeights,
    grid: &SearchGrid,
    rng: &mut Rng,
) -> Result<CalibResult> {
    let tags = random_halves(x.len(), rng)?;
    let table = ErrorTable::build(w, x, specs, mode, grid)?;
    table.select(table.values_relabeled(sens, &tags)?)
}

/// Search with one nonnegative weight per token.
pub fn ablation_tokenwise(
    w: &Matrix,
    x: &ModalBatch,
    token_weights: &[f64],
    specs: &CalibSpecs,
    mode: CalibMode,
    grid: &SearchGrid,
) -> Result<CalibResult> {
    let table = ErrorTable::build(w, x, specs, mode, grid)?;
    table.select(table.values_tokenwise(token_weights)?)
}
