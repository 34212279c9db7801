//! Uniform integer quantization.
//!
//! Weights in weight-only mode use asymmetric min/max quantization over
//! contiguous groups of input channels within each output row. Weight-activation
//! mode uses symmetric absmax quantization, one scale per weight row (output
//! channel) or per activation row (token).
//!
//! Rounding is half away from zero and clamping happens after rounding, so the
//! symmetric range is `[-(2^(N-1) - 1), 2^(N-1) - 1]`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Matrix;

pub const DEFAULT_GROUP_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    Asymmetric,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    PerGroup(usize),
    PerOutputChannel,
    PerToken,
}

/// Declarative description of a quantization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub mode: QuantMode,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn asym_group(bits: u8, group_size: usize) -> Self {
        Self { bits, mode: QuantMode::Asymmetric, granularity: Granularity::PerGroup(group_size) }
    }

    pub fn sym_per_channel(bits: u8) -> Self {
        Self { bits, mode: QuantMode::Symmetric, granularity: Granularity::PerOutputChannel }
    }

    pub fn sym_per_token(bits: u8) -> Self {
        Self { bits, mode: QuantMode::Symmetric, granularity: Granularity::PerToken }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 3 | 4 | 8) {
            bail!(Config, "unsupported bit width {} (expected 3, 4 or 8)", self.bits);
        }
        match (self.mode, self.granularity) {
            (QuantMode::Asymmetric, Granularity::PerGroup(0)) => {
                bail!(Config, "group size must be positive")
            }
            (QuantMode::Asymmetric, Granularity::PerGroup(_)) => Ok(()),
            (QuantMode::Symmetric, Granularity::PerOutputChannel | Granularity::PerToken) => Ok(()),
            (mode, g) => bail!(Config, "{:?} quantization cannot use {:?} granularity", mode, g),
        }
    }

    /// Largest code magnitude (symmetric) or largest code (asymmetric).
    pub fn max_code(&self) -> i32 {
        match self.mode {
            QuantMode::Asymmetric => (1 << self.bits) - 1,
            QuantMode::Symmetric => (1 << (self.bits - 1)) - 1,
        }
    }

    pub fn min_code(&self) -> i32 {
        match self.mode {
            QuantMode::Asymmetric => 0,
            QuantMode::Symmetric => -self.max_code(),
        }
    }

    /// The same spec with the group clamped to a row of `cols` columns; layers
    /// narrower than the configured group are quantized one group per row.
    pub fn fit_to(&self, cols: usize) -> Self {
        match self.granularity {
            Granularity::PerGroup(g) if g > cols => Self { granularity: Granularity::PerGroup(cols), ..*self },
            _ => *self,
        }
    }

    /// Columns covered by one scale on a row of `cols` columns.
    pub fn group_len(&self, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerGroup(g) => g,
            Granularity::PerOutputChannel | Granularity::PerToken => cols,
        }
    }
}

/// Integer codes with their scales and (asymmetric only) zero points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub spec: QuantSpec,
    pub rows: usize,
    pub cols: usize,
    /// Row-major codes; unsigned range for asymmetric, signed for symmetric.
    pub codes: Vec<i16>,
    /// One scale per group (row-major over `rows × groups_per_row`).
    pub scales: Vec<f32>,
    /// One zero point per group, asymmetric only.
    pub zeros: Option<Vec<f32>>,
}

impl QuantizedTensor {
    pub fn groups_per_row(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.cols / self.spec.group_len(self.cols)
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Scale applied to element `(row, col)`.
    pub fn scale_at(&self, row: usize, col: usize) -> f32 {
        let g = self.spec.group_len(self.cols);
        self.scales[row * self.groups_per_row() + col / g]
    }
}

#[inline]
fn round_half_away(x: f64) -> f64 {
    // libm's round is half away from zero
    libm::round(x)
}

// Moves the scale (by at most a few ulps) to a fixed point of
// "dequantize the extreme code, then recompute the scale from it", which makes
// fake quantization exactly idempotent. Plain iteration can oscillate between
// neighbours, so it falls back to the nearest fixed point in a small ulp window.
fn settle_scale(s0: f32, rescale: impl Fn(f32) -> f32) -> f32 {
    let fixed = |s: f32| s > 0.0 && s.is_finite() && rescale(s) == s;
    let mut s = s0;
    for _ in 0..4 {
        if fixed(s) {
            return s;
        }
        let next = rescale(s);
        if !(next > 0.0) {
            break;
        }
        s = next;
    }
    let bits = s0.to_bits();
    for k in 1..=16u32 {
        for cand in [f32::from_bits(bits - k), f32::from_bits(bits + k)] {
            if fixed(cand) {
                return cand;
            }
        }
    }
    s0
}

fn check_spec(m: &Matrix, spec: &QuantSpec, mode: QuantMode) -> Result<usize> {
    spec.validate()?;
    if spec.mode != mode {
        bail!(Config, "expected {:?} spec, got {:?}", mode, spec.mode);
    }
    let g = spec.group_len(m.cols());
    if m.cols() > 0 && !m.cols().is_multiple_of(g) {
        bail!(Config, "group size {} does not divide {} columns", g, m.cols());
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        bail!(Domain, "non-finite value in quantizer input");
    }
    Ok(g)
}

/// Asymmetric group-wise quantization along the columns of each row.
pub fn quantize_asym_group(w: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let g = check_spec(w, spec, QuantMode::Asymmetric)?;
    let (codes, scales, zeros) = asym_kernel(w, spec.bits, g);
    Ok(QuantizedTensor {
        spec: *spec,
        rows: w.rows(),
        cols: w.cols(),
        codes,
        scales,
        zeros: Some(zeros),
    })
}

// Unvalidated min/max kernel; any bit width in 1..=15 is arithmetically sound.
fn asym_kernel(w: &Matrix, bits: u8, g: usize) -> (Vec<i16>, Vec<f32>, Vec<f32>) {
    let qmax = ((1u32 << bits) - 1) as f64;
    let groups = if w.cols() == 0 { 0 } else { w.cols() / g };
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    let mut scales = Vec::with_capacity(w.rows() * groups);
    let mut zeros = Vec::with_capacity(w.rows() * groups);
    for row in w.row_iter() {
        for chunk in row.chunks_exact(g.max(1)) {
            let lo = chunk.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            zeros.push(lo);
            if hi == lo {
                scales.push(1.0);
                codes.extend(core::iter::repeat_n(0, chunk.len()));
                continue;
            }
            let s = settle_scale(((hi as f64 - lo as f64) / qmax) as f32, |s| {
                ((dequant_one(qmax, s, lo) as f64 - lo as f64) / qmax) as f32
            });
            let (s64, z64) = (s as f64, lo as f64);
            scales.push(s);
            for &v in chunk {
                let c = round_half_away((v as f64 - z64) / s64).clamp(0.0, qmax);
                codes.push(c as i16);
            }
        }
    }
    (codes, scales, zeros)
}

/// Symmetric absmax quantization with one scale per row.
pub fn quantize_sym(m: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    check_spec(m, spec, QuantMode::Symmetric)?;
    let qmax = spec.max_code() as f64;
    let mut codes = Vec::with_capacity(m.rows() * m.cols());
    let mut scales = Vec::with_capacity(m.rows());
    for row in m.row_iter() {
        let absmax = row.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if absmax == 0.0 {
            scales.push(1.0);
            codes.extend(core::iter::repeat_n(0, row.len()));
            continue;
        }
        let s = settle_scale((absmax as f64 / qmax) as f32, |s| {
            (dequant_one(qmax, s, 0.0) as f64 / qmax) as f32
        });
        let s64 = s as f64;
        scales.push(s);
        for &v in row {
            let c = round_half_away(v as f64 / s64).clamp(-qmax, qmax);
            codes.push(c as i16);
        }
    }
    Ok(QuantizedTensor { spec: *spec, rows: m.rows(), cols: m.cols(), codes, scales, zeros: None })
}

pub fn quantize(m: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    match spec.mode {
        QuantMode::Asymmetric => quantize_asym_group(m, spec),
        QuantMode::Symmetric => quantize_sym(m, spec),
    }
}

/// `code × S + Z` evaluated in f64 and rounded once.
#[inline]
pub fn dequant_one(code: f64, s: f32, z: f32) -> f32 {
    (code * s as f64 + z as f64) as f32
}

/// `code × S + Z` (asymmetric) or `code × S` (symmetric).
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let mut out = Vec::with_capacity(q.codes.len());
    if q.cols > 0 {
        let g = q.spec.group_len(q.cols);
        let groups = q.cols / g;
        for r in 0..q.rows {
            for gi in 0..groups {
                let idx = r * groups + gi;
                let s = q.scales[idx];
                let z = q.zeros.as_ref().map_or(0.0, |z| z[idx]);
                let base = r * q.cols + gi * g;
                for &c in &q.codes[base..base + g] {
                    out.push(dequant_one(c as f64, s, z));
                }
            }
        }
    }
    Matrix::from_vec_unchecked(q.rows, q.cols, out)
}

/// Quantize-then-dequantize: the `Q(·)` of every reconstruction objective.
pub fn fake_quant(m: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    Ok(dequantize(&quantize(m, spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn asym_exactly_representable_group() {
        // two-bit width is below the supported set, so drive the kernel directly
        let w = Matrix::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (codes, scales, zeros) = asym_kernel(&w, 2, 4);
        assert_eq!((codes, scales, zeros), (vec![0, 1, 2, 3], vec![1.0], vec![0.0]));
        assert!(QuantSpec::asym_group(2, 4).validate().is_err());

        let q = QuantizedTensor {
            spec: QuantSpec::asym_group(2, 4),
            rows: 1,
            cols: 4,
            codes: vec![0, 1, 2, 3],
            scales: vec![1.0],
            zeros: Some(vec![0.0]),
        };
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn asym_constant_group_is_degenerate() {
        let w = Matrix::new(1, 4, vec![5.0; 4]).unwrap();
        let q = quantize_asym_group(&w, &QuantSpec::asym_group(3, 4)).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.zeros, Some(vec![5.0]));
        assert_eq!(q.codes, vec![0; 4]);
        assert_eq!(dequantize(&q).data(), &[5.0; 4]);
    }

    #[test]
    fn sym_examples() {
        let m = Matrix::new(1, 2, vec![-7.0, 7.0]).unwrap();
        let q = quantize_sym(&m, &QuantSpec::sym_per_channel(4)).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.codes, vec![-7, 7]);
        assert_eq!(q.zeros, None);

        let z = Matrix::zeros(2, 3);
        let q = quantize_sym(&z, &QuantSpec::sym_per_token(8)).unwrap();
        assert_eq!(q.scales, vec![1.0, 1.0]);
        assert!(q.codes.iter().all(|c| *c == 0));
        assert_eq!(dequantize(&q), z);
    }

    #[test]
    fn spec_errors() {
        let w = Matrix::zeros(2, 6);
        assert!(matches!(
            quantize(&w, &QuantSpec::asym_group(5, 6)),
            Err(crate::Error::Config(_))
        ));
        assert!(matches!(
            quantize(&w, &QuantSpec::asym_group(4, 4)),
            Err(crate::Error::Config(_))
        ));
        let bad = QuantSpec { granularity: Granularity::PerToken, ..QuantSpec::asym_group(4, 2) };
        assert!(bad.validate().is_err());
        let bad = QuantSpec { granularity: Granularity::PerGroup(2), ..QuantSpec::sym_per_token(8) };
        assert!(bad.validate().is_err());
        assert!(quantize_sym(&w, &QuantSpec::asym_group(4, 2)).is_err());
    }

    #[test]
    fn fit_to_clamps_wide_groups() {
        let spec = QuantSpec::asym_group(3, DEFAULT_GROUP_SIZE);
        assert_eq!(spec.fit_to(64).granularity, Granularity::PerGroup(64));
        assert_eq!(spec.fit_to(256).granularity, Granularity::PerGroup(128));
        assert_eq!(QuantSpec::sym_per_channel(8).fit_to(4), QuantSpec::sym_per_channel(8));
    }

    #[test]
    fn random_group_of_128_within_half_step() {
        let mut rng = Rng::new(11);
        let w = Matrix::random_normal(1, 128, 1.0, &mut rng);
        let q = quantize(&w, &QuantSpec::asym_group(3, 128)).unwrap();
        let d = dequantize(&q);
        let s = q.scales[0];
        for (a, b) in d.data().iter().zip(w.data()) {
            assert!((a - b).abs() <= s / 2.0 + 1e-6);
        }
    }

    #[test]
    fn per_token_bound_on_random_activation() {
        let mut rng = Rng::new(5);
        let m = Matrix::random_uniform(4, 6, -3.0, 3.0, &mut rng);
        let q = quantize(&m, &QuantSpec::sym_per_token(8)).unwrap();
        let d = dequantize(&q);
        for r in 0..4 {
            for c in 0..6 {
                assert!((d.get(r, c) - m.get(r, c)).abs() <= q.scales[r] / 2.0 + 1e-6);
            }
        }
    }

    #[test]
    fn eight_bit_sym_error_bound_from_scale_formula() {
        let mut rng = Rng::new(9);
        let m = Matrix::random_uniform(8, 32, -1.0, 1.0, &mut rng);
        let fq = fake_quant(&m, &QuantSpec::sym_per_channel(8)).unwrap();
        for r in 0..8 {
            let absmax = m.row(r).iter().fold(0.0f32, |a, v| a.max(v.abs()));
            for c in 0..32 {
                assert!((fq.get(r, c) - m.get(r, c)).abs() <= absmax / 254.0 + 1e-6);
            }
        }
    }

    #[test]
    fn representable_input_unchanged() {
        let m = Matrix::new(2, 4, vec![-7.0, -1.0, 0.0, 7.0, 0.0, 0.5, 1.0, 3.5]).unwrap();
        assert_eq!(fake_quant(&m, &QuantSpec::sym_per_channel(4)).unwrap(), m);
        let w = Matrix::new(1, 8, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(fake_quant(&w, &QuantSpec::asym_group(3, 8)).unwrap(), w);
    }

    #[test]
    fn eight_bit_round_trip_group_bound() {
        let mut rng = Rng::new(21);
        let w = Matrix::random_normal(6, 256, 0.5, &mut rng);
        let q = quantize(&w, &QuantSpec::asym_group(8, 128)).unwrap();
        let d = dequantize(&q);
        for r in 0..6 {
            for c in 0..256 {
                assert!((d.get(r, c) - w.get(r, c)).abs() <= q.scale_at(r, c) / 2.0 + 1e-6);
            }
        }
    }

    fn all_specs() -> [QuantSpec; 8] {
        [
            QuantSpec::asym_group(3, 8),
            QuantSpec::asym_group(4, 16),
            QuantSpec::asym_group(8, 8),
            QuantSpec::sym_per_channel(3),
            QuantSpec::sym_per_channel(4),
            QuantSpec::sym_per_channel(8),
            QuantSpec::sym_per_token(4),
            QuantSpec::sym_per_token(8),
        ]
    }

    proptest! {
        #[test]
        fn codes_stay_in_range_and_error_is_bounded(seed in any::<u64>(), rows in 1usize..5, scale in 0.01f32..50.0) {
            let mut rng = Rng::new(seed);
            let m = Matrix::random_normal(rows, 32, scale, &mut rng);
            for spec in all_specs() {
                let q = quantize(&m, &spec).unwrap();
                prop_assert!(q.codes.iter().all(|c| (spec.min_code()..=spec.max_code()).contains(&(*c as i32))));
                prop_assert!(q.scales.iter().all(|s| *s > 0.0));
                let d = dequantize(&q);
                for r in 0..rows {
                    for c in 0..32 {
                        let s = q.scale_at(r, c);
                        prop_assert!((d.get(r, c) - m.get(r, c)).abs() <= s / 2.0 + 1e-6 * (1.0 + m.get(r, c).abs()));
                    }
                }
            }
        }

        #[test]
        fn fake_quant_is_idempotent(seed in any::<u64>(), rows in 1usize..5) {
            let mut rng = Rng::new(seed);
            let m = Matrix::random_uniform(rows, 32, -1.0, 1.0, &mut rng);
            for spec in all_specs() {
                let once = fake_quant(&m, &spec).unwrap();
                let twice = fake_quant(&once, &spec).unwrap();
                prop_assert_eq!(&twice, &once, "{:?}", spec);
            }
        }

        #[test]
        fn asym_group_extremes_survive(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let w = Matrix::random_uniform(3, 16, -4.0, 4.0, &mut rng);
            let d = fake_quant(&w, &QuantSpec::asym_group(3, 8)).unwrap();
            for r in 0..3 {
                for g in 0..2 {
                    let src = &w.row(r)[g * 8..g * 8 + 8];
                    let dst = &d.row(r)[g * 8..g * 8 + 8];
                    let (lo, hi) = src.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
                    let dlo = dst.iter().copied().fold(f32::INFINITY, f32::min);
                    let dhi = dst.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    prop_assert_eq!(dlo, lo);
                    prop_assert!((dhi - hi).abs() <= 2.0 * f32::EPSILON * hi.abs().max(1.0));
                }
            }
        }
    }
}
