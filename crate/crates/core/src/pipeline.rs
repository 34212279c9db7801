//! End-to-end driver: train the toy model, profile it, quantize it under every
//! configured method and score the result on held-out samples.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{
    CalibMode, CalibSpecs, Candidate, EqualizationVector, ErrorTable, ModalWeights, ObjectiveKind, SearchGrid,
    DEFAULT_VISION_FACTOR,
};
use crate::error::{bail, Error, Result};
use crate::quant::{dequantize, quantize, QuantSpec, QuantizedTensor, DEFAULT_GROUP_SIZE};
use crate::tensor::{Matrix, ModalBatch, Modality, Rng};
use crate::toyvlm::{
    eval_task, gen_data, sensitivity_profile, token_grad_weights_all, train, InputTransform, KeySplit, LinearId,
    ModelConfig, SensitivityProfile, SyntheticSample, TaskConfig, TaskScore, ToyModel, TokenGradWeights, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rtn,
    Cwe,
    BalancedCwe,
    MbqMse,
    MbqMae,
    RandomSplit,
    #[serde(rename = "tokenwise")]
    TokenWise,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Rtn,
        Method::Cwe,
        Method::BalancedCwe,
        Method::MbqMse,
        Method::MbqMae,
        Method::RandomSplit,
        Method::TokenWise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Cwe => "cwe",
            Method::BalancedCwe => "balanced-cwe",
            Method::MbqMse => "mbq-mse",
            Method::MbqMae => "mbq-mae",
            Method::RandomSplit => "random-split",
            Method::TokenWise => "tokenwise",
        }
    }

    /// Search objective, or `None` for plain round-to-nearest.
    pub fn objective(self, vision_factor: f64) -> Option<ObjectiveKind> {
        Some(match self {
            Method::Rtn => return None,
            Method::Cwe => ObjectiveKind::CweMse,
            Method::BalancedCwe => ObjectiveKind::BalancedCwe { vision_factor },
            Method::MbqMse => ObjectiveKind::MbqMse,
            Method::MbqMae => ObjectiveKind::MbqMae,
            Method::RandomSplit => ObjectiveKind::RandomSplit,
            Method::TokenWise => ObjectiveKind::TokenWise,
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Method::ALL.iter().find(|m| m.name() == s) {
            Some(m) => Ok(*m),
            None => bail!(Config, "unknown method '{}'", s),
        }
    }
}

/// Bit widths of weights and (optionally) activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    W3,
    W4,
    W4A8,
    W8A8,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::W3, Scheme::W4, Scheme::W4A8, Scheme::W8A8];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::W3 => "w3",
            Scheme::W4 => "w4",
            Scheme::W4A8 => "w4a8",
            Scheme::W8A8 => "w8a8",
        }
    }

    pub fn mode(self) -> CalibMode {
        match self {
            Scheme::W3 | Scheme::W4 => CalibMode::WeightOnly,
            Scheme::W4A8 | Scheme::W8A8 => CalibMode::WeightActivation,
        }
    }

    /// Group-wise asymmetric weights below 8 bits, per-channel symmetric at 8;
    /// activations per-token symmetric.
    pub fn specs(self, group_size: usize) -> CalibSpecs {
        match self {
            Scheme::W3 => CalibSpecs { weight: QuantSpec::asym_group(3, group_size), act: None },
            Scheme::W4 => CalibSpecs { weight: QuantSpec::asym_group(4, group_size), act: None },
            Scheme::W4A8 => CalibSpecs { weight: QuantSpec::asym_group(4, group_size), act: Some(QuantSpec::sym_per_token(8)) },
            Scheme::W8A8 => CalibSpecs { weight: QuantSpec::sym_per_channel(8), act: Some(QuantSpec::sym_per_token(8)) },
        }
    }

    /// From weight bits and an optional activation width.
    pub fn from_bits(weight: u8, act: Option<u8>) -> Result<Self> {
        Ok(match (weight, act) {
            (3, None) => Scheme::W3,
            (4, None) => Scheme::W4,
            (4, Some(8)) => Scheme::W4A8,
            (8, Some(8)) => Scheme::W8A8,
            _ => bail!(Config, "unsupported scheme W{}A{}", weight, act.map_or(16, |a| a)),
        })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Scheme::ALL.iter().find(|m| m.name().eq_ignore_ascii_case(s)) {
            Some(m) => Ok(*m),
            None => bail!(Config, "unknown scheme '{}'", s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: Vec<u64>,
    pub task: TaskConfig,
    pub d_model: usize,
    pub n_blocks: usize,
    pub train: TrainConfig,
    pub train_samples: usize,
    pub calib_samples: usize,
    pub eval_samples: usize,
    pub methods: Vec<Method>,
    pub schemes: Vec<Scheme>,
    pub group_size: usize,
    pub grid: SearchGrid,
    pub vision_factor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            task: TaskConfig::default(),
            d_model: 64,
            n_blocks: 4,
            train: TrainConfig::default(),
            train_samples: 2048,
            calib_samples: 128,
            eval_samples: 512,
            methods: Method::ALL.to_vec(),
            schemes: alloc::vec![Scheme::W3],
            group_size: DEFAULT_GROUP_SIZE,
            grid: SearchGrid::default(),
            vision_factor: DEFAULT_VISION_FACTOR,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_config().validate()?;
        self.grid.validate()?;
        if self.seeds.is_empty() || self.methods.is_empty() || self.schemes.is_empty() {
            bail!(Config, "seeds, methods and schemes must be nonempty");
        }
        if self.train_samples == 0 || self.calib_samples == 0 || self.eval_samples == 0 {
            bail!(Config, "dataset sizes must be positive");
        }
        if !(self.vision_factor >= 0.0) {
            bail!(Config, "vision factor must be nonnegative");
        }
        for s in &self.schemes {
            s.specs(self.group_size).weight.validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::for_task(&self.task, self.d_model, self.n_blocks)
    }
}

/// RNG streams of one seed; each pipeline stage draws from its own.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN_DATA: u64 = 1;
    pub const CALIB_DATA: u64 = 2;
    pub const EVAL_DATA: u64 = 3;
    pub const TRAIN: u64 = 4;
    /// Base of the per-layer random-split streams.
    pub const SPLIT: u64 = 100;
}

/// Datasets of one seed. Calibration and evaluation draw from disjoint key sets.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Vec<SyntheticSample>,
    pub calib: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
}

pub fn seed_data(cfg: &PipelineConfig, seed: u64) -> Result<SeedData> {
    Ok(SeedData {
        train: gen_data(&cfg.task, &mut Rng::stream(seed, streams::TRAIN_DATA), cfg.train_samples, KeySplit::All)?,
        calib: gen_data(&cfg.task, &mut Rng::stream(seed, streams::CALIB_DATA), cfg.calib_samples, KeySplit::Calibration)?,
        eval: gen_data(&cfg.task, &mut Rng::stream(seed, streams::EVAL_DATA), cfg.eval_samples, KeySplit::Evaluation)?,
    })
}

/// Initializes and trains the seed's FP model.
pub fn train_seed(cfg: &PipelineConfig, seed: u64, data: &SeedData) -> Result<(ToyModel, crate::toyvlm::TrainReport)> {
    let init = ToyModel::init(cfg.model_config(), &mut Rng::stream(seed, streams::INIT))?;
    train(&init, &data.train, &cfg.train, &mut Rng::stream(seed, streams::TRAIN))
}

/// Every linear layer's FP inputs over the calibration set, tokens in sample order.
pub fn capture_inputs(model: &ToyModel, data: &[SyntheticSample]) -> Result<Vec<ModalBatch>> {
    let layers: Vec<LinearId> = model.config().linear_ids().collect();
    let mut rows: Vec<Vec<f32>> = alloc::vec![Vec::new(); layers.len()];
    let mut tags: Vec<Modality> = Vec::new();
    for s in data {
        let cache = model.forward(&s.ids())?;
        for (buf, l) in rows.iter_mut().zip(&layers) {
            buf.extend_from_slice(cache.linear_io(*l).0);
        }
        tags.extend(s.tags());
    }
    let n = tags.len();
    rows.into_iter()
        .map(|r| {
            let cols = if n == 0 { 0 } else { r.len() / n };
            ModalBatch::new(Matrix::new(n, cols, r)?, tags.clone())
        })
        .collect()
}

/// Everything a layer search reads besides the weights.
pub struct CalibContext<'a> {
    pub inputs: &'a [ModalBatch],
    pub profile: Option<&'a SensitivityProfile>,
    pub token_weights: Option<&'a [TokenGradWeights]>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub layer: LinearId,
    pub chosen: Candidate,
    pub e: EqualizationVector,
    /// `Q(W ⊙ E)`.
    pub weight: QuantizedTensor,
    /// Search objective at the chosen candidate; `None` for round-to-nearest.
    pub objective_value: Option<f64>,
    pub candidate_values: Vec<(Candidate, f64)>,
    pub g_vision: Option<f64>,
    pub g_language: Option<f64>,
    /// Unweighted element MSE and sensitivity-weighted MAE of the output at
    /// the chosen candidate.
    pub recon_mse: f64,
    pub recon_weighted_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub method: Method,
    pub scheme: Scheme,
    pub layers: Vec<LayerQuant>,
}

impl QuantizedModel {
    /// Per-layer input rewrite `x ↦ Q_a(x ⊙ E⁻¹)`, indexed like the model's linear layers.
    pub fn transforms(&self, group_size: usize) -> Vec<Option<InputTransform>> {
        let act = self.scheme.specs(group_size).act;
        self.layers
            .iter()
            .map(|l| Some(InputTransform { inv_scale: l.e.inverse(), act_spec: act }))
            .collect()
    }

    /// The FP model with every linear weight replaced by its dequantized `Q(W ⊙ E)`.
    pub fn apply(&self, fp: &ToyModel) -> Result<ToyModel> {
        let mut m = fp.clone();
        for l in &self.layers {
            m = m.with_linear_weight(l.layer, &dequantize(&l.weight))?;
        }
        Ok(m)
    }

    pub fn evaluate(&self, fp: &ToyModel, group_size: usize, data: &[SyntheticSample]) -> Result<TaskScore> {
        let t = self.transforms(group_size);
        eval_task(&self.apply(fp)?, Some(&t), data)
    }
}

fn modal_weights(profile: Option<&SensitivityProfile>, layer: LinearId) -> Result<Option<ModalWeights>> {
    match profile.map(|p| p.get(layer)) {
        None => Ok(None),
        Some(None) => bail!(Config, "sensitivity profile has no entry for {}", layer),
        Some(Some(l)) => ModalWeights::new(l.g_vision, l.g_language).map(Some),
    }
}

/// Objective value of every row of `table` under `kind`. The random-split
/// relabeling is drawn from a per-layer stream of `seed`.
pub fn objective_values(
    table: &ErrorTable,
    kind: ObjectiveKind,
    sens: Option<ModalWeights>,
    token_weights: Option<&TokenGradWeights>,
    seed: u64,
    layer: LinearId,
) -> Result<Vec<f64>> {
    match kind {
        ObjectiveKind::RandomSplit => {
            let Some(g) = sens else { bail!(Config, "random split needs modality sensitivities") };
            let mut rng = Rng::stream(seed, streams::SPLIT + layer.index() as u64);
            let tags = crate::calib::random_halves(table.tags().len(), &mut rng)?;
            table.values_relabeled(g, &tags)
        }
        ObjectiveKind::TokenWise => match token_weights {
            Some(tw) => table.values_tokenwise(&tw.weights),
            None => bail!(Config, "token-wise objective needs token gradient weights"),
        },
        kind => table.values(kind, sens),
    }
}

/// Quantizes `model` under each method in `methods`, sharing one candidate
/// error table per layer across methods.
pub fn quantize_methods(
    model: &ToyModel,
    methods: &[Method],
    scheme: Scheme,
    cfg: &PipelineConfig,
    ctx: &CalibContext<'_>,
) -> Result<Vec<QuantizedModel>> {
    let mcfg = model.config();
    if ctx.inputs.len() != mcfg.n_linear() {
        bail!(Shape, "{} captured inputs for {} layers", ctx.inputs.len(), mcfg.n_linear());
    }
    for m in methods {
        match m {
            Method::MbqMse | Method::MbqMae | Method::RandomSplit if ctx.profile.is_none() => {
                bail!(Config, "method {} needs a sensitivity profile", m)
            }
            Method::TokenWise if ctx.token_weights.is_none() => bail!(Config, "method {} needs token gradient weights", m),
            _ => {}
        }
    }
    let specs = scheme.specs(cfg.group_size);
    let mode = scheme.mode();
    let mut out: Vec<QuantizedModel> =
        methods.iter().map(|&method| QuantizedModel { method, scheme, layers: Vec::new() }).collect();
    let mut grid = cfg.grid.clone();
    // Round-to-nearest is read off the identity row of the same table.
    grid.include_identity = true;
    let id_grid = cfg.grid.include_identity;

    for layer in mcfg.linear_ids() {
        let w = model.linear_weight(layer);
        let x = &ctx.inputs[layer.index()];
        let table = ErrorTable::build(&w, x, &specs, mode, &grid)?;
        let sens = modal_weights(ctx.profile, layer)?;
        let mse = table.values(ObjectiveKind::CweMse, None)?;
        let wmae = match sens {
            Some(g) => Some(table.values(ObjectiveKind::MbqMae, Some(g))?),
            None => None,
        };
        // Searched methods only see the configured candidates.
        let skip = usize::from(!id_grid);

        for (q, &method) in out.iter_mut().zip(methods) {
            let (idx, objective_value, candidate_values) = match method.objective(cfg.vision_factor) {
                None => (0, None, Vec::new()),
                Some(kind) => {
                    let tw = ctx.token_weights.map(|t| &t[layer.index()]);
                    let values = objective_values(&table, kind, sens, tw, ctx.seed, layer)?;
                    let mut best = skip;
                    for i in skip..values.len() {
                        if values[i] < values[best] {
                            best = i;
                        }
                    }
                    let cv: Vec<(Candidate, f64)> =
                        table.candidates()[skip..].iter().copied().zip(values[skip..].iter().copied()).collect();
                    (best, Some(values[best]), cv)
                }
            };
            let e = table.vector(idx).clone();
            let weight = quantize(&w.scale_cols(e.factors())?, &specs.weight.fit_to(w.cols()))?;
            q.layers.push(LayerQuant {
                layer,
                chosen: table.candidates()[idx],
                e,
                weight,
                objective_value,
                candidate_values,
                g_vision: sens.map(|g| g.vision),
                g_language: sens.map(|g| g.language),
                recon_mse: mse[idx],
                recon_weighted_mae: wmae.as_ref().map(|v| v[idx]),
            });
        }
    }
    Ok(out)
}

/// One method's held-out score, relative to the FP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub scheme: Scheme,
    pub method: Method,
    pub loss: f64,
    pub exact_match: f64,
    pub delta_loss: f64,
    pub delta_exact_match: f64,
    pub layers: Vec<LayerRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub chosen: String,
    pub objective_value: Option<f64>,
    pub recon_mse: f64,
    pub recon_weighted_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSensitivity {
    pub block: usize,
    pub g_vision: f64,
    pub g_language: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train_initial_loss: f32,
    pub train_final_loss: f32,
    pub fp: TaskScore,
    pub sensitivity: Vec<BlockSensitivity>,
    pub rows: Vec<MethodRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub scheme: Scheme,
    pub method: String,
    pub loss: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub runs: Vec<SeedRun>,
    /// Medians over seeds; method `fp` is the unquantized baseline.
    pub medians: Vec<MedianRow>,
}

impl EvalReport {
    pub fn median(&self, scheme: Scheme, method: &str) -> Option<&MedianRow> {
        self.medians.iter().find(|r| r.scheme == scheme && r.method == method)
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Everything derived from one seed's trained model before quantization.
pub struct PreparedSeed {
    pub seed: u64,
    pub data: SeedData,
    pub model: ToyModel,
    pub train_report: crate::toyvlm::TrainReport,
    pub fp: TaskScore,
    pub profile: SensitivityProfile,
    pub token_weights: Vec<TokenGradWeights>,
    pub inputs: Vec<ModalBatch>,
}

pub fn prepare_seed(cfg: &PipelineConfig, seed: u64) -> Result<PreparedSeed> {
    let data = seed_data(cfg, seed).map_err(|e| stage("data", e))?;
    let (model, train_report) = train_seed(cfg, seed, &data).map_err(|e| stage("train", e))?;
    let fp = eval_task(&model, None, &data.eval).map_err(|e| stage("eval", e))?;
    let profile = sensitivity_profile(&model, &data.calib).map_err(|e| stage("profile", e))?;
    let token_weights = if cfg.methods.contains(&Method::TokenWise) {
        token_grad_weights_all(&model, &data.calib).map_err(|e| stage("profile", e))?
    } else {
        Vec::new()
    };
    let inputs = capture_inputs(&model, &data.calib).map_err(|e| stage("capture", e))?;
    Ok(PreparedSeed { seed, data, model, train_report, fp, profile, token_weights, inputs })
}

fn stage(name: &str, e: Error) -> Error {
    let msg = |m: String| alloc::format!("{}: {}", name, m);
    match e {
        Error::Shape(m) => Error::Shape(msg(m)),
        Error::Domain(m) => Error::Domain(msg(m)),
        Error::Config(m) => Error::Config(msg(m)),
        Error::Format(m) => Error::Format(msg(m)),
        d @ Error::Diverged { .. } => d,
    }
}

/// Quantizes and scores one prepared seed under every configured scheme and method.
pub fn run_seed(cfg: &PipelineConfig, p: &PreparedSeed) -> Result<SeedRun> {
    let mut rows = Vec::new();
    let ctx = CalibContext {
        inputs: &p.inputs,
        profile: Some(&p.profile),
        token_weights: if p.token_weights.is_empty() { None } else { Some(&p.token_weights) },
        seed: p.seed,
    };
    for &scheme in &cfg.schemes {
        let qms = quantize_methods(&p.model, &cfg.methods, scheme, cfg, &ctx).map_err(|e| stage("calibrate", e))?;
        for qm in qms {
            let s = qm.evaluate(&p.model, cfg.group_size, &p.data.eval).map_err(|e| stage("eval", e))?;
            rows.push(MethodRow {
                scheme,
                method: qm.method,
                loss: s.loss,
                exact_match: s.exact_match,
                delta_loss: s.loss - p.fp.loss,
                delta_exact_match: s.exact_match - p.fp.exact_match,
                layers: qm
                    .layers
                    .iter()
                    .map(|l| LayerRow {
                        layer: l.layer.name(),
                        chosen: l.chosen.to_string(),
                        objective_value: l.objective_value,
                        recon_mse: l.recon_mse,
                        recon_weighted_mae: l.recon_weighted_mae,
                    })
                    .collect(),
            });
        }
    }
    let sensitivity = (0..cfg.n_blocks)
        .filter_map(|b| p.profile.block_mean(b).map(|(v, l)| BlockSensitivity { block: b, g_vision: v, g_language: l }))
        .collect();
    Ok(SeedRun {
        seed: p.seed,
        train_initial_loss: p.train_report.initial_loss,
        train_final_loss: p.train_report.final_loss,
        fp: p.fp,
        sensitivity,
        rows,
    })
}

/// Medians over seeds of every (scheme, method) cell plus the FP baseline.
pub fn summarize(cfg: &PipelineConfig, runs: &[SeedRun]) -> Vec<MedianRow> {
    let mut out = Vec::new();
    for &scheme in &cfg.schemes {
        let fp_loss: Vec<f64> = runs.iter().map(|r| r.fp.loss).collect();
        let fp_em: Vec<f64> = runs.iter().map(|r| r.fp.exact_match).collect();
        out.push(MedianRow {
            scheme,
            method: "fp".into(),
            loss: median(&fp_loss).unwrap_or(f64::NAN),
            exact_match: median(&fp_em).unwrap_or(f64::NAN),
        });
        for &method in &cfg.methods {
            let cells: Vec<&MethodRow> =
                runs.iter().flat_map(|r| &r.rows).filter(|r| r.scheme == scheme && r.method == method).collect();
            let loss: Vec<f64> = cells.iter().map(|r| r.loss).collect();
            let em: Vec<f64> = cells.iter().map(|r| r.exact_match).collect();
            out.push(MedianRow {
                scheme,
                method: method.name().into(),
                loss: median(&loss).unwrap_or(f64::NAN),
                exact_match: median(&em).unwrap_or(f64::NAN),
            });
        }
    }
    out
}

/// The full method × scheme matrix over every configured seed.
pub fn run_matrix(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let p = prepare_seed(cfg, seed)?;
        runs.push(run_seed(cfg, &p)?);
    }
    Ok(EvalReport { config: cfg.clone(), medians: summarize(cfg, &runs), runs })
}
