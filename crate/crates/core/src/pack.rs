//! Sub-byte weight packing and the fused dequantize-GEMV kernel.
//!
//! 3-bit layout: each run of eight codes forms a 24-bit little-endian word,
//! code `i` in bits `[3i, 3i + 3)`, stored as three bytes. 4-bit layout: two
//! codes per byte, low nibble first. Rows are padded with code 0 to a whole
//! number of chunks; the logical column count is recorded next to the bytes.
//!
//! Blob layout used by quantized checkpoints (all integers little-endian):
//!
//! ```text
//! u32 rows | u32 cols (padded) | u32 logical_cols | u32 group_size | u32 bits
//! rows × (cols × bits / 8) packed code bytes, row by row
//! rows × groups f32 scales
//! rows × groups f32 zeros          (asymmetric only)
//! ```
//!
//! Symmetric codes are stored in two's complement within their bit width.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::quant::{dequant_one, Granularity, QuantMode, QuantSpec, QuantizedTensor};
use crate::tensor::{dot_f64, Matrix};

pub const BLOB_HEADER_LEN: usize = 20;

/// Number of codes per packing chunk for a bit width.
fn chunk_codes(bits: u8) -> usize {
    match bits {
        3 => 8,
        4 => 2,
        _ => 1,
    }
}

/// `n` rounded up to a whole packing chunk.
pub fn padded_len(n: usize, bits: u8) -> usize {
    n.div_ceil(chunk_codes(bits)) * chunk_codes(bits)
}

/// Packs 3-bit codes, eight per three bytes. `codes.len()` must be a multiple of 8.
pub fn pack_w3(codes: &[u8]) -> Result<Vec<u8>> {
    if !codes.len().is_multiple_of(8) {
        bail!(Shape, "3-bit packing needs a multiple of 8 codes, got {}", codes.len());
    }
    if let Some(c) = codes.iter().find(|c| **c >= 8) {
        bail!(Domain, "3-bit code {} out of range", c);
    }
    let mut out = Vec::with_capacity(codes.len() / 8 * 3);
    for chunk in codes.chunks_exact(8) {
        let word = chunk
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, &c)| acc | (c as u32) << (3 * i));
        out.extend_from_slice(&word.to_le_bytes()[..3]);
    }
    Ok(out)
}

#[inline]
fn load_w3_chunk(bytes: &[u8]) -> u32 {
    bytes[0] as u32 | (bytes[1] as u32) << 8 | (bytes[2] as u32) << 16
}

/// Inverse of [`pack_w3`] on the first `logical_len` codes.
pub fn unpack_w3(bytes: &[u8], logical_len: usize) -> Result<Vec<u8>> {
    let expected = logical_len.div_ceil(8) * 3;
    if bytes.len() != expected {
        bail!(Format, "{} packed bytes for {} codes, expected {}", bytes.len(), logical_len, expected);
    }
    let mut out = Vec::with_capacity(logical_len.div_ceil(8) * 8);
    for chunk in bytes.chunks_exact(3) {
        let word = load_w3_chunk(chunk);
        out.extend((0..8).map(|i| ((word >> (3 * i)) & 7) as u8));
    }
    out.truncate(logical_len);
    Ok(out)
}

/// Packs 4-bit codes two per byte, low nibble first; odd lengths are padded with 0.
pub fn pack_w4(codes: &[u8]) -> Result<Vec<u8>> {
    if let Some(c) = codes.iter().find(|c| **c >= 16) {
        bail!(Domain, "4-bit code {} out of range", c);
    }
    Ok(codes
        .chunks(2)
        .map(|p| p[0] | p.get(1).copied().unwrap_or(0) << 4)
        .collect())
}

pub fn unpack_w4(bytes: &[u8], logical_len: usize) -> Result<Vec<u8>> {
    if bytes.len() != logical_len.div_ceil(2) {
        bail!(Format, "{} packed bytes for {} 4-bit codes", bytes.len(), logical_len);
    }
    let mut out: Vec<u8> = bytes.iter().flat_map(|b| [b & 0x0F, b >> 4]).collect();
    out.truncate(logical_len);
    Ok(out)
}

/// 3-bit asymmetric weights packed row by row, with per-group scales and zero points.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedW3 {
    pub rows: usize,
    /// Padded column count (multiple of 8).
    pub cols: usize,
    pub logical_cols: usize,
    pub group_size: usize,
    pub bytes: Vec<u8>,
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
}

impl PackedW3 {
    pub fn from_quantized(q: &QuantizedTensor) -> Result<Self> {
        let group_size = match (q.spec.bits, q.spec.mode, q.spec.granularity) {
            (3, QuantMode::Asymmetric, Granularity::PerGroup(g)) => g,
            _ => bail!(Config, "PackedW3 needs 3-bit asymmetric group codes, got {:?}", q.spec),
        };
        let zeros = match &q.zeros {
            Some(z) => z.clone(),
            None => bail!(Format, "asymmetric tensor without zero points"),
        };
        let cols = padded_len(q.cols, 3);
        let mut bytes = Vec::with_capacity(q.rows * cols * 3 / 8);
        let mut row = alloc::vec![0u8; cols];
        for r in 0..q.rows {
            for (dst, c) in row.iter_mut().zip(&q.codes[r * q.cols..(r + 1) * q.cols]) {
                *dst = *c as u8;
            }
            bytes.extend(pack_w3(&row)?);
        }
        Ok(Self {
            rows: q.rows,
            cols,
            logical_cols: q.cols,
            group_size,
            bytes,
            scales: q.scales.clone(),
            zeros,
        })
    }

    pub fn row_bytes(&self) -> usize {
        self.cols * 3 / 8
    }

    pub fn groups_per_row(&self) -> usize {
        self.logical_cols.div_ceil(self.group_size)
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.rows * self.logical_cols);
        for r in 0..self.rows {
            let rb = &self.bytes[r * self.row_bytes()..(r + 1) * self.row_bytes()];
            let mut codes = unpack_w3(rb, self.cols)?;
            codes.truncate(self.logical_cols);
            out.extend(codes);
        }
        Ok(out)
    }

    /// Materializes the full-precision weights (`code × S + Z`).
    pub fn dequantize(&self) -> Result<Matrix> {
        let codes = self.codes()?;
        let gpr = self.groups_per_row();
        let mut data = Vec::with_capacity(codes.len());
        for r in 0..self.rows {
            for j in 0..self.logical_cols {
                let gi = r * gpr + j / self.group_size;
                data.push(dequant_one(codes[r * self.logical_cols + j] as f64, self.scales[gi], self.zeros[gi]));
            }
        }
        Matrix::new(self.rows, self.logical_cols, data)
    }
}

/// Reference GEMV: `y_i = Σ_j w[i][j]·x[j]`, `f64` accumulation in ascending `j`.
pub fn gemv_ref(w: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if w.cols() != x.len() {
        bail!(Shape, "gemv of {}x{} with vector of {}", w.rows(), w.cols(), x.len());
    }
    Ok(w.row_iter().map(|row| dot_f64(row, x) as f32).collect())
}

/// GEMV straight from packed 3-bit codes.
///
/// Each row's bytes are streamed once; codes are dequantized in registers and
/// accumulated into a group-local `f64`, which is then added to the row total.
/// No full-precision weight row is ever materialized.
pub fn gemv_w3_fused(p: &PackedW3, x: &[f32]) -> Result<Vec<f32>> {
    if p.logical_cols != x.len() {
        bail!(Shape, "packed gemv of {}x{} with vector of {}", p.rows, p.logical_cols, x.len());
    }
    let mut y = Vec::with_capacity(p.rows);
    if p.group_size.is_multiple_of(8) && p.logical_cols.is_multiple_of(p.group_size) {
        for r in 0..p.rows {
            y.push(row_aligned(p, r, x) as f32);
        }
    } else {
        for r in 0..p.rows {
            y.push(row_general(p, r, x) as f32);
        }
    }
    Ok(y)
}

// Groups start on chunk boundaries: decode whole 8-code chunks.
#[inline]
fn row_aligned(p: &PackedW3, r: usize, x: &[f32]) -> f64 {
    let rb = &p.bytes[r * p.row_bytes()..(r + 1) * p.row_bytes()];
    let gpr = p.groups_per_row();
    let chunks_per_group = p.group_size / 8;
    let mut total = 0.0f64;
    for g in 0..gpr {
        let s = p.scales[r * gpr + g] as f64;
        let z = p.zeros[r * gpr + g] as f64;
        let mut acc = 0.0f64;
        for c in g * chunks_per_group..(g + 1) * chunks_per_group {
            let word = load_w3_chunk(&rb[c * 3..c * 3 + 3]);
            let xs = &x[c * 8..c * 8 + 8];
            for (i, xv) in xs.iter().enumerate() {
                let w = ((word >> (3 * i)) & 7) as f64 * s + z;
                acc += w * *xv as f64;
            }
        }
        total += acc;
    }
    total
}

fn row_general(p: &PackedW3, r: usize, x: &[f32]) -> f64 {
    let rb = &p.bytes[r * p.row_bytes()..(r + 1) * p.row_bytes()];
    let gpr = p.groups_per_row();
    let mut total = 0.0f64;
    let mut word = 0u32;
    for g in 0..gpr {
        let s = p.scales[r * gpr + g] as f64;
        let z = p.zeros[r * gpr + g] as f64;
        let start = g * p.group_size;
        let end = (start + p.group_size).min(p.logical_cols);
        let mut acc = 0.0f64;
        for (j, xv) in x.iter().enumerate().take(end).skip(start) {
            if j % 8 == 0 || j == start {
                word = load_w3_chunk(&rb[j / 8 * 3..j / 8 * 3 + 3]);
            }
            let w = ((word >> (3 * (j % 8))) & 7) as f64 * s + z;
            acc += w * *xv as f64;
        }
        total += acc;
    }
    total
}

/// Analytic bytes read by one GEMV over a `rows × cols` weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    /// FP32 weights: `rows × cols × 4`.
    pub reference_bytes: u64,
    /// Packed 3-bit codes: `rows × padded_cols × 3 / 8`.
    pub packed_payload_bytes: u64,
    /// One f32 scale and one f32 zero per group: 8 bytes per group.
    pub metadata_bytes: u64,
}

impl Traffic {
    pub fn w3(rows: usize, cols: usize, group_size: usize) -> Self {
        let (rows, cols) = (rows as u64, cols as u64);
        let padded = padded_len(cols as usize, 3) as u64;
        Self {
            reference_bytes: rows * cols * 4,
            packed_payload_bytes: rows * padded * 3 / 8,
            metadata_bytes: rows * cols.div_ceil(group_size as u64) * 8,
        }
    }

    pub fn packed_bytes(&self) -> u64 {
        self.packed_payload_bytes + self.metadata_bytes
    }

    pub fn ratio(&self) -> f64 {
        self.packed_bytes() as f64 / self.reference_bytes as f64
    }

    pub fn payload_ratio(&self) -> f64 {
        self.packed_payload_bytes as f64 / self.reference_bytes as f64
    }

    /// Exact rational comparison `packed / reference == num / den`.
    pub fn ratio_equals(&self, num: u64, den: u64) -> bool {
        self.packed_bytes() * den == self.reference_bytes * num
    }
}

fn to_field(bits: u8, code: i16) -> u8 {
    (code as u8) & (((1u16 << bits) - 1) as u8)
}

fn from_field(bits: u8, field: u8, signed: bool) -> i16 {
    if signed && field & (1 << (bits - 1)) != 0 {
        field as i16 - (1i16 << bits)
    } else {
        field as i16
    }
}

/// Serializes a quantized tensor into the packed blob layout.
pub fn encode_blob(q: &QuantizedTensor) -> Result<Vec<u8>> {
    q.spec.validate()?;
    let bits = q.spec.bits;
    let cols = padded_len(q.cols, bits);
    let group = q.spec.group_len(q.cols);
    let mut out = Vec::new();
    for v in [q.rows, cols, q.cols, group, bits as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut row = alloc::vec![0u8; cols];
    for r in 0..q.rows {
        for (dst, c) in row.iter_mut().zip(&q.codes[r * q.cols..(r + 1) * q.cols]) {
            *dst = to_field(bits, *c);
        }
        match bits {
            3 => out.extend(pack_w3(&row)?),
            4 => out.extend(pack_w4(&row)?),
            _ => out.extend_from_slice(&row),
        }
    }
    for s in &q.scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    if let Some(z) = &q.zeros {
        for v in z {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Blob header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobHeader {
    pub rows: usize,
    pub cols: usize,
    pub logical_cols: usize,
    pub group_size: usize,
    pub bits: u8,
}

pub fn read_blob_header(bytes: &[u8]) -> Result<BlobHeader> {
    if bytes.len() < BLOB_HEADER_LEN {
        bail!(Format, "blob shorter than its {}-byte header", BLOB_HEADER_LEN);
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let h = BlobHeader {
        rows: field(0),
        cols: field(1),
        logical_cols: field(2),
        group_size: field(3),
        bits: field(4) as u8,
    };
    if !matches!(h.bits, 3 | 4 | 8) || field(4) > 8 {
        bail!(Format, "blob bit width {}", field(4));
    }
    if h.cols != padded_len(h.logical_cols, h.bits) {
        bail!(Format, "padded width {} inconsistent with {} logical columns", h.cols, h.logical_cols);
    }
    Ok(h)
}

/// Parses a blob written by [`encode_blob`]. The mode (asymmetric/symmetric)
/// and granularity come from the checkpoint manifest.
pub fn decode_blob(bytes: &[u8], spec: &QuantSpec) -> Result<QuantizedTensor> {
    let h = read_blob_header(bytes)?;
    if h.bits != spec.bits {
        bail!(Format, "blob holds {}-bit codes, manifest says {}", h.bits, spec.bits);
    }
    let groups = if h.logical_cols == 0 { 0 } else { h.logical_cols.div_ceil(h.group_size.max(1)) };
    let row_bytes = h.cols * h.bits as usize / 8;
    let n_meta = h.rows * groups;
    let asym = spec.mode == QuantMode::Asymmetric;
    let expected = BLOB_HEADER_LEN + h.rows * row_bytes + n_meta * 4 * if asym { 2 } else { 1 };
    if bytes.len() != expected {
        bail!(Format, "blob is {} bytes, layout implies {}", bytes.len(), expected);
    }
    let mut codes = Vec::with_capacity(h.rows * h.logical_cols);
    let body = &bytes[BLOB_HEADER_LEN..];
    for r in 0..h.rows {
        let rb = &body[r * row_bytes..(r + 1) * row_bytes];
        let fields = match h.bits {
            3 => unpack_w3(rb, h.cols)?,
            4 => unpack_w4(rb, h.cols)?,
            _ => rb.to_vec(),
        };
        codes.extend(fields[..h.logical_cols].iter().map(|f| from_field(h.bits, *f, !asym)));
    }
    let floats = |off: usize| -> Vec<f32> {
        (0..n_meta)
            .map(|i| f32::from_le_bytes(body[off + 4 * i..off + 4 * i + 4].try_into().unwrap()))
            .collect()
    };
    let scales = floats(h.rows * row_bytes);
    let zeros = asym.then(|| floats(h.rows * row_bytes + n_meta * 4));
    let spec = match spec.granularity {
        Granularity::PerGroup(_) => QuantSpec { granularity: Granularity::PerGroup(h.group_size), ..*spec },
        _ => *spec,
    };
    Ok(QuantizedTensor { spec, rows: h.rows, cols: h.logical_cols, codes, scales, zeros })
}

/// Round-trip codec checks used by `pack --selftest`: random 8-tuples, every
/// single-nonzero tuple, and the 4-bit codec. Returns the number of tuples checked.
pub fn codec_selftest(rng: &mut crate::tensor::Rng, random_tuples: usize) -> Result<usize> {
    let mut checked = 0;
    let mut check = |t: &[u8; 8]| -> Result<()> {
        let bytes = pack_w3(t)?;
        if unpack_w3(&bytes, 8)?.as_slice() != t {
            bail!(Format, "3-bit round trip failed for {:?}", t);
        }
        let nib: [u8; 8] = core::array::from_fn(|i| t[i] | (t[(i + 3) % 8] & 1) << 3);
        if unpack_w4(&pack_w4(&nib)?, 8)?.as_slice() != nib {
            bail!(Format, "4-bit round trip failed for {:?}", nib);
        }
        checked += 1;
        Ok(())
    };
    for pos in 0..8 {
        for v in 1..8u8 {
            let mut t = [0u8; 8];
            t[pos] = v;
            check(&t)?;
        }
    }
    for _ in 0..random_tuples {
        let t: [u8; 8] = core::array::from_fn(|_| rng.below(8) as u8);
        check(&t)?;
    }
    Ok(checked)
}
