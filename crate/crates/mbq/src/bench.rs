//! Reference vs fused packed 3-bit GEMV timings.

use std::time::Instant;

use mbq_core::pack::{gemv_ref, gemv_w3_fused, PackedW3, Traffic};
use mbq_core::quant::{quantize, QuantSpec, DEFAULT_GROUP_SIZE};
use mbq_core::{Matrix, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(rows, cols)` of the attention output projection and the three MLP
/// projections of a 7B-class decoder.
pub const TABLE6_SHAPES: [(usize, usize); 4] = [(3584, 3584), (3584, 10752), (3584, 18944), (18944, 3584)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 1, iters: 5, group_size: DEFAULT_GROUP_SIZE, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    /// Median wall time per call.
    pub reference_ns: u64,
    pub fused_ns: u64,
    pub speedup: f64,
    pub reference_bytes: u64,
    pub packed_bytes: u64,
    pub bytes_ratio: f64,
    /// Fused output vs dequantize-then-reference, and the allowed bound.
    pub max_abs_err: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub shapes: Vec<ShapeReport>,
}

/// Random 3-bit instance: the packed weights, their dequantized FP32 form and an input vector.
pub fn instance(rows: usize, cols: usize, group_size: usize, rng: &mut Rng) -> Result<(PackedW3, Matrix, Vec<f32>)> {
    let q = {
        let w = Matrix::random_uniform(rows, cols, -1.0, 1.0, rng);
        quantize(&w, &QuantSpec::asym_group(3, group_size).fit_to(cols))?
    };
    let packed = PackedW3::from_quantized(&q)?;
    drop(q);
    let dense = packed.dequantize()?;
    let x = (0..cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Ok((packed, dense, x))
}

/// Largest `|fused − reference|` and the bound `1e-4 · (1 + |y|∞)`.
pub fn equivalence(packed: &PackedW3, dense: &Matrix, x: &[f32]) -> Result<(f64, f64)> {
    let y_ref = gemv_ref(dense, x)?;
    let y = gemv_w3_fused(packed, x)?;
    let inf = y_ref.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let err = y.iter().zip(&y_ref).fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()));
    Ok((err, 1e-4 * (1.0 + inf)))
}

fn median_ns(warmup: usize, iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut t = Vec::with_capacity(iters.max(1));
    for _ in 0..iters.max(1) {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_nanos() as u64);
    }
    t.sort_unstable();
    Ok(t[t.len() / 2])
}

pub fn bench_shape(rows: usize, cols: usize, cfg: &BenchConfig, rng: &mut Rng) -> Result<ShapeReport> {
    let (packed, dense, x) = instance(rows, cols, cfg.group_size, rng)?;
    let (max_abs_err, tolerance) = equivalence(&packed, &dense, &x)?;
    if !(max_abs_err <= tolerance) {
        return Err(Error::Format(format!("{rows}x{cols}: fused GEMV off by {max_abs_err:e} (bound {tolerance:e})")));
    }
    let reference_ns = median_ns(cfg.warmup, cfg.iters, || {
        std::hint::black_box(gemv_ref(&dense, &x)?);
        Ok(())
    })?;
    let fused_ns = median_ns(cfg.warmup, cfg.iters, || {
        std::hint::black_box(gemv_w3_fused(&packed, &x)?);
        Ok(())
    })?;
    let traffic = Traffic::w3(rows, cols, packed.group_size);
    Ok(ShapeReport {
        rows,
        cols,
        group_size: packed.group_size,
        reference_ns,
        fused_ns,
        speedup: reference_ns as f64 / fused_ns.max(1) as f64,
        reference_bytes: traffic.reference_bytes,
        packed_bytes: traffic.packed_bytes(),
        bytes_ratio: traffic.ratio(),
        max_abs_err,
        tolerance,
    })
}

pub fn bench_gemv(shapes: &[(usize, usize)], cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = Rng::new(cfg.seed);
    let shapes = shapes.iter().map(|&(r, c)| bench_shape(r, c, cfg, &mut rng)).collect::<Result<_>>()?;
    Ok(BenchReport { config: *cfg, shapes })
}
