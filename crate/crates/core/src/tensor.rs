//! Dense row-major matrices, modality-tagged token batches and the seedable PRNG.
//!
//! Every reduction accumulates in `f64` in ascending index order and is only
//! narrowed to `f32` at the end, so two runs of the same computation agree bit
//! for bit.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Dense 2-D matrix of finite `f32` values, row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Shape, "data length {} != {}x{}", data.len(), rows, cols);
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            bail!(Domain, "non-finite entry {} at flat index {}", data[pos], pos);
        }
        Ok(Self { rows, cols, data })
    }

    /// Constructor for crate-internal kernels whose outputs are finite by construction.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, alloc::vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Result<Self> {
        Self::new(rows, cols, alloc::vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = alloc::vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_vec_unchecked(n, n, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                bail!(Shape, "row {} has {} columns, expected {}", i, r.len(), cols);
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Uniform random entries in `[lo, hi)`.
    pub fn random_uniform(rows: usize, cols: usize, lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Self::from_vec_unchecked(rows, cols, data)
    }

    pub fn random_normal(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Self::from_vec_unchecked(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Self {
        let mut data = alloc::vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self::from_vec_unchecked(self.cols, self.rows, data)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            bail!(
                Shape,
                "matmul {}x{} by {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            );
        }
        Ok(matmul_nt(self, &other.transpose()))
    }

    /// `self · otherᵀ`, the natural layout for `Y = X Wᵀ` with `W` stored out × in.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            bail!(
                Shape,
                "matmul_t {}x{} by ({}x{})^T",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            );
        }
        Ok(matmul_nt(self, other))
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_cols(&self, factors: &[f32]) -> Result<Matrix> {
        if factors.len() != self.cols {
            bail!(Shape, "{} factors for {} columns", factors.len(), self.cols);
        }
        if let Some(f) = factors.iter().find(|f| !(**f > 0.0) || !f.is_finite()) {
            bail!(Domain, "column factor {} must be positive and finite", f);
        }
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.cols.max(1)) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        Matrix::new(self.rows, self.cols, data)
    }

    /// Gathers the listed rows, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(indices.len(), self.cols, data)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                bail!(Shape, "vstack of {} and {} columns", cols, m.cols);
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Ascending-order `f64` dot product.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

// Four independent ascending accumulators; each lane is bitwise identical to
// `dot_f64` on its own row but the lanes overlap in the pipeline.
#[inline]
fn dot4_f64(a: &[f32], b0: &[f32], b1: &[f32], b2: &[f32], b3: &[f32]) -> [f64; 4] {
    let n = a.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    let mut acc = [0.0f64; 4];
    for k in 0..n {
        let x = a[k] as f64;
        acc[0] += x * b0[k] as f64;
        acc[1] += x * b1[k] as f64;
        acc[2] += x * b2[k] as f64;
        acc[3] += x * b3[k] as f64;
    }
    acc
}

fn matmul_nt(a: &Matrix, bt: &Matrix) -> Matrix {
    let (m, n) = (a.rows, bt.rows);
    let mut out = alloc::vec![0.0f32; m * n];
    for i in 0..m {
        let ar = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let r = dot4_f64(ar, bt.row(j), bt.row(j + 1), bt.row(j + 2), bt.row(j + 3));
            for l in 0..4 {
                orow[j + l] = r[l] as f32;
            }
            j += 4;
        }
        while j < n {
            orow[j] = dot_f64(ar, bt.row(j)) as f32;
            j += 1;
        }
    }
    Matrix::from_vec_unchecked(m, n, out)
}

/// Modality of a token row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Vision,
    Language,
}

impl Modality {
    /// Wire code used by tensor files: 0 = vision, 1 = language.
    pub fn code(self) -> u8 {
        match self {
            Modality::Vision => 0,
            Modality::Language => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Vision),
            1 => Ok(Modality::Language),
            c => bail!(Format, "unknown modality code {}", c),
        }
    }
}

/// Token activations with one modality tag per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalBatch {
    tokens: Matrix,
    tags: Vec<Modality>,
}

impl ModalBatch {
    pub fn new(tokens: Matrix, tags: Vec<Modality>) -> Result<Self> {
        if tags.len() != tokens.rows() {
            bail!(Shape, "{} tags for {} token rows", tags.len(), tokens.rows());
        }
        Ok(Self { tokens, tags })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.tags.iter().filter(|t| **t == modality).count()
    }

    /// Returns `(X_v, X_l)`, each keeping the original row order.
    pub fn split_by_tag(&self) -> (Matrix, Matrix) {
        let (v, l): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| self.tags[i] == Modality::Vision);
        (self.tokens.select_rows(&v), self.tokens.select_rows(&l))
    }

    /// Inverse of [`split_by_tag`](Self::split_by_tag): re-interleaves the two
    /// parts following `tags`.
    pub fn interleave(vision: &Matrix, language: &Matrix, tags: Vec<Modality>) -> Result<Self> {
        let nv = tags.iter().filter(|t| **t == Modality::Vision).count();
        let nl = tags.len() - nv;
        if vision.rows() != nv || language.rows() != nl {
            bail!(
                Shape,
                "tags need {} vision / {} language rows, got {} / {}",
                nv,
                nl,
                vision.rows(),
                language.rows()
            );
        }
        let cols = if nv > 0 { vision.cols() } else { language.cols() };
        if (nv > 0 && vision.cols() != cols) || (nl > 0 && language.cols() != cols) {
            bail!(Shape, "vision/language column counts differ");
        }
        let mut data = Vec::with_capacity(tags.len() * cols);
        let (mut iv, mut il) = (0, 0);
        for t in &tags {
            match t {
                Modality::Vision => {
                    data.extend_from_slice(vision.row(iv));
                    iv += 1;
                }
                Modality::Language => {
                    data.extend_from_slice(language.row(il));
                    il += 1;
                }
            }
        }
        Self::new(Matrix::from_vec_unchecked(tags.len(), cols, data), tags)
    }

    /// Same tokens under a different tagging.
    pub fn retag(&self, tags: Vec<Modality>) -> Result<Self> {
        Self::new(self.tokens.clone(), tags)
    }

    pub fn concat(parts: &[ModalBatch]) -> Result<Self> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| &p.tokens).collect();
        let tokens = Matrix::vstack(&mats)?;
        let tags = parts.iter().flat_map(|p| p.tags.iter().copied()).collect();
        Self::new(tokens, tags)
    }
}

/// SplitMix64 generator: one 64-bit word of state, identical stream per seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream derived from a parent seed and a stream index
    /// (worker id, data split, ...).
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(mix64(seed ^ mix64(stream.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let v = lo + (hi - lo) * self.next_f64() as f32;
        // rounding can land exactly on `hi`
        if v >= hi {
            lo
        } else {
            v
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal sample (Box-Muller).
    pub fn normal(&mut self) -> f32 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        (r * libm::cos(core::f64::consts::TAU * u2)) as f32
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
