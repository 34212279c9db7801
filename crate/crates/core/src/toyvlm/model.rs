use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::data::TaskConfig;
use crate::error::{bail, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub max_seq: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_hidden: usize,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn for_task(task: &TaskConfig, d_model: usize, n_blocks: usize) -> Self {
        Self {
            vocab: task.vocab_size(),
            max_seq: task.seq_len(),
            d_model,
            n_blocks,
            d_hidden: 2 * d_model,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.max_seq == 0 || self.d_model == 0 || self.d_hidden == 0 {
            bail!(Config, "model dimensions must be positive: {:?}", self);
        }
        Ok(())
    }

    pub fn n_linear(&self) -> usize {
        self.n_blocks * LinearKind::ALL.len()
    }

    pub fn linear_ids(&self) -> impl Iterator<Item = LinearId> {
        let n = self.n_blocks;
        (0..n).flat_map(|block| LinearKind::ALL.into_iter().map(move |kind| LinearId { block, kind }))
    }

    /// `(out, in)` shape of a linear layer's weight.
    pub fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        let (d, h) = (self.d_model, self.d_hidden);
        match kind {
            LinearKind::Q | LinearKind::K | LinearKind::V | LinearKind::Out => (d, d),
            LinearKind::Up => (h, d),
            LinearKind::Down => (d, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinearKind {
    Q,
    K,
    V,
    Out,
    Up,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] =
        [LinearKind::Q, LinearKind::K, LinearKind::V, LinearKind::Out, LinearKind::Up, LinearKind::Down];

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Q => "q",
            LinearKind::K => "k",
            LinearKind::V => "v",
            LinearKind::Out => "out",
            LinearKind::Up => "up",
            LinearKind::Down => "down",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// A linear layer of the model: `block{b}.{q,k,v,out,up,down}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinearId {
    pub block: usize,
    pub kind: LinearKind,
}

impl LinearId {
    pub fn new(block: usize, kind: LinearKind) -> Self {
        Self { block, kind }
    }

    /// Dense index in `0..n_blocks * 6`.
    pub fn index(&self) -> usize {
        self.block * LinearKind::ALL.len() + self.kind.index()
    }

    pub fn from_index(i: usize) -> Self {
        Self { block: i / 6, kind: LinearKind::ALL[i % 6] }
    }

    pub fn name(&self) -> String {
        format!("block{}.{}", self.block, self.kind.name())
    }

    pub fn parse(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("block")?;
        let (b, k) = rest.split_once('.')?;
        let kind = LinearKind::ALL.into_iter().find(|kind| kind.name() == k)?;
        Some(Self { block: b.parse().ok()?, kind })
    }
}

impl fmt::Display for LinearId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockOffsets {
    pub norm1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm2: usize,
    pub up: usize,
    pub down: usize,
}

impl BlockOffsets {
    pub fn linear(&self, kind: LinearKind) -> usize {
        match kind {
            LinearKind::Q => self.wq,
            LinearKind::K => self.wk,
            LinearKind::V => self.wv,
            LinearKind::Out => self.wo,
            LinearKind::Up => self.up,
            LinearKind::Down => self.down,
        }
    }
}

/// Flat parameter layout: every tensor lives at an offset of one buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Offsets {
    pub tok: usize,
    pub pos: usize,
    pub blocks: Vec<BlockOffsets>,
    pub final_norm: usize,
    pub head: usize,
    pub total: usize,
}

impl Offsets {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.d_model, cfg.d_hidden);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(cfg.vocab * d);
        let pos = take(cfg.max_seq * d);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockOffsets {
                norm1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                norm2: take(d),
                up: take(h * d),
                down: take(d * h),
            })
            .collect();
        let final_norm = take(d);
        let head = take(cfg.vocab * d);
        Self { tok, pos, blocks, final_norm, head, total: at }
    }
}

/// Named parameter tensor: `(name, rows, cols, offset)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

pub fn param_entries(cfg: &ModelConfig) -> Vec<ParamEntry> {
    let off = Offsets::new(cfg);
    let d = cfg.d_model;
    let e = |name: String, rows, cols, offset| ParamEntry { name, rows, cols, offset };
    let mut out = alloc::vec![
        e("tok_emb".into(), cfg.vocab, d, off.tok),
        e("pos_emb".into(), cfg.max_seq, d, off.pos),
    ];
    for (b, bo) in off.blocks.iter().enumerate() {
        out.push(e(format!("block{b}.norm1"), 1, d, bo.norm1));
        for kind in LinearKind::ALL {
            let (r, c) = cfg.linear_shape(kind);
            out.push(e(format!("block{b}.{}", kind.name()), r, c, bo.linear(kind)));
            if kind == LinearKind::Out {
                out.push(e(format!("block{b}.norm2"), 1, d, bo.norm2));
            }
        }
    }
    out.push(e("final_norm".into(), 1, d, off.final_norm));
    out.push(e("head".into(), cfg.vocab, d, off.head));
    out
}

/// The toy multimodal decoder: shared token embedding over language and
/// vision-pattern ids, learned positions, pre-RMSNorm single-head attention
/// blocks with a GELU MLP, untied output head. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ModelConfig,
    pub(crate) offsets: Offsets,
    pub(crate) params: Vec<f32>,
}

impl ToyModel {
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let off = Offsets::new(&cfg);
        let mut params = alloc::vec![0.0f32; off.total];
        let (d, h) = (cfg.d_model, cfg.d_hidden);
        let mut fill = |start: usize, n: usize, std: f32, rng: &mut Rng| {
            for p in &mut params[start..start + n] {
                *p = rng.normal() * std;
            }
        };
        let inv = |n: usize| 1.0 / libm::sqrtf(n as f32);
        let resid = inv(2 * cfg.n_blocks);
        fill(off.tok, cfg.vocab * d, 1.0, rng);
        fill(off.pos, cfg.max_seq * d, 1.0, rng);
        for bo in &off.blocks {
            fill(bo.wq, d * d, inv(d), rng);
            fill(bo.wk, d * d, inv(d), rng);
            fill(bo.wv, d * d, inv(d), rng);
            fill(bo.wo, d * d, inv(d) * resid, rng);
            fill(bo.up, h * d, inv(d), rng);
            fill(bo.down, d * h, inv(h) * resid, rng);
        }
        fill(off.head, cfg.vocab * d, inv(d), rng);
        for bo in &off.blocks {
            params[bo.norm1..bo.norm1 + d].fill(1.0);
            params[bo.norm2..bo.norm2 + d].fill(1.0);
        }
        params[off.final_norm..off.final_norm + d].fill(1.0);
        Ok(Self { cfg, offsets: off, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        let offsets = Offsets::new(&cfg);
        if params.len() != offsets.total {
            bail!(Shape, "{} parameters for a model needing {}", params.len(), offsets.total);
        }
        if params.iter().any(|p| !p.is_finite()) {
            bail!(Domain, "non-finite parameter");
        }
        Ok(Self { cfg, offsets, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_entries(&self) -> Vec<ParamEntry> {
        param_entries(&self.cfg)
    }

    /// Every parameter tensor as a named matrix.
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        self.param_entries()
            .into_iter()
            .map(|e| {
                let data = self.params[e.offset..e.offset + e.rows * e.cols].to_vec();
                (e.name, Matrix::from_vec_unchecked(e.rows, e.cols, data))
            })
            .collect()
    }

    pub fn from_tensors(cfg: ModelConfig, tensors: &[(String, Matrix)]) -> Result<Self> {
        let entries = param_entries(&cfg);
        let mut params = alloc::vec![0.0f32; Offsets::new(&cfg).total];
        for e in &entries {
            let Some((_, m)) = tensors.iter().find(|(n, _)| *n == e.name) else {
                bail!(Format, "missing tensor {}", e.name);
            };
            if m.shape() != (e.rows, e.cols) {
                bail!(Shape, "tensor {} is {:?}, expected {:?}", e.name, m.shape(), (e.rows, e.cols));
            }
            params[e.offset..e.offset + e.rows * e.cols].copy_from_slice(m.data());
        }
        Self::from_params(cfg, params)
    }

    fn linear_range(&self, id: LinearId) -> core::ops::Range<usize> {
        let (r, c) = self.cfg.linear_shape(id.kind);
        let start = self.offsets.blocks[id.block].linear(id.kind);
        start..start + r * c
    }

    /// Weight of a linear layer, stored out × in.
    pub fn linear_weight(&self, id: LinearId) -> Matrix {
        let (r, c) = self.cfg.linear_shape(id.kind);
        Matrix::from_vec_unchecked(r, c, self.params[self.linear_range(id)].to_vec())
    }

    pub fn with_linear_weight(&self, id: LinearId, w: &Matrix) -> Result<ToyModel> {
        if w.shape() != self.cfg.linear_shape(id.kind) {
            bail!(Shape, "{} expects {:?}, got {:?}", id, self.cfg.linear_shape(id.kind), w.shape());
        }
        let mut out = self.clone();
        let range = self.linear_range(id);
        out.params[range].copy_from_slice(w.data());
        Ok(out)
    }

    pub(crate) fn params_as<T: super::nn::Real>(&self) -> Vec<T> {
        self.params.iter().map(|p| T::of(*p as f64)).collect()
    }
}
