//! Forward and reverse-mode passes of the toy model, generic over the float type.
//!
//! Training and evaluation run in `f32`; the `f64` instantiation exists so
//! finite-difference checks can recompute the loss in double precision through
//! exactly the same code.

use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use super::model::{LinearId, LinearKind, ModelConfig, Offsets};
use crate::quant::{fake_quant, QuantSpec};
use crate::tensor::Matrix;

// Transcendentals go straight to libm: identical bits in every build, with or
// without std linked in.
pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn neg_infinity() -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $abs:path, $max:path, $sqrt:path, $exp:path, $ln:path, $tanh:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            #[inline]
            fn abs(self) -> Self {
                $abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                $max(self, other)
            }
            #[inline]
            fn sqrt(self) -> Self {
                $sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                $exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                $ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                $tanh(self)
            }
        }
    };
}

impl_real!(f32, libm::fabsf, libm::fmaxf, libm::sqrtf, libm::expf, libm::logf, libm::tanhf);
impl_real!(f64, libm::fabs, libm::fmax, libm::sqrt, libm::exp, libm::log, libm::tanh);

// Eight fixed lanes, combined pairwise: deterministic and vectorizable.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len();
    let b = &b[..n];
    let mut acc = [T::zero(); 8];
    let full = n / 8 * 8;
    let mut i = 0;
    while i < full {
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
        i += 8;
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for j in full..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

/// `y = x · wᵀ` with `x: n × din`, `w: dout × din`.
fn linear_fwd<T: Real>(x: &[T], w: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = alloc::vec![T::zero(); n * dout];
    for t in 0..n {
        let xr = &x[t * din..(t + 1) * din];
        for o in 0..dout {
            y[t * dout + o] = dot(xr, &w[o * din..(o + 1) * din]);
        }
    }
    y
}

/// Accumulates `dw += dyᵀ x` and returns `dx = dy · w`.
fn linear_bwd<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    dw: &mut [T],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let mut dx = alloc::vec![T::zero(); n * din];
    for t in 0..n {
        let xr = &x[t * din..(t + 1) * din];
        let dxr = &mut dx[t * din..(t + 1) * din];
        for o in 0..dout {
            let g = dy[t * dout + o];
            if g == T::zero() {
                continue;
            }
            axpy(dxr, g, &w[o * din..(o + 1) * din]);
            axpy(&mut dw[o * din..(o + 1) * din], g, xr);
        }
    }
    dx
}

/// Returns `(y, inv_rms)` for `y = g ⊙ x / rms(x)` row-wise.
fn rmsnorm_fwd<T: Real>(x: &[T], g: &[T], n: usize, d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut y = alloc::vec![T::zero(); n * d];
    let mut inv = Vec::with_capacity(n);
    let dn = T::of(d as f64);
    for t in 0..n {
        let xr = &x[t * d..(t + 1) * d];
        let ms = dot(xr, xr) / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        for i in 0..d {
            y[t * d + i] = g[i] * xr[i] * r;
        }
    }
    (y, inv)
}

fn rmsnorm_bwd<T: Real>(dy: &[T], x: &[T], g: &[T], inv: &[T], dg: &mut [T], n: usize, d: usize) -> Vec<T> {
    let mut dx = alloc::vec![T::zero(); n * d];
    let dn = T::of(d as f64);
    for t in 0..n {
        let (xr, dyr) = (&x[t * d..(t + 1) * d], &dy[t * d..(t + 1) * d]);
        let r = inv[t];
        let mut s = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xr[i] * r;
            s += g[i] * dyr[i] * xr[i];
        }
        let c = s * r * r * r / dn;
        for i in 0..d {
            dx[t * d + i] = g[i] * dyr[i] * r - xr[i] * c;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(u: T) -> T {
    let inner = T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u);
    T::of(0.5) * u * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(u: T) -> T {
    let inner = T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u);
    let th = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * u * u);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * u * (T::one() - th * th) * dinner
}

/// Per-layer input rewrite used to run an equalized, quantized layer:
/// `x ↦ Q_a(x ⊙ inv_scale)` with optional per-token activation fake-quant.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTransform {
    pub inv_scale: Vec<f32>,
    pub act_spec: Option<QuantSpec>,
}

/// Adds `delta` to one element of one linear layer's output (finite-difference probes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub layer: LinearId,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Default, Clone, Copy)]
pub(crate) struct Hooks<'a> {
    pub transforms: Option<&'a [Option<InputTransform>]>,
    pub perturb: Option<Perturbation>,
}

/// Activations of one block, kept for the backward pass and for calibration.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub h_in: Vec<T>,
    pub a: Vec<T>,
    pub inv1: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub p: Vec<T>,
    pub ctx: Vec<T>,
    pub o: Vec<T>,
    pub h_mid: Vec<T>,
    pub m: Vec<T>,
    pub inv2: Vec<T>,
    pub u: Vec<T>,
    pub z: Vec<T>,
    pub dn: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub n: usize,
    pub ids: Vec<u16>,
    pub blocks: Vec<BlockCache<T>>,
    pub h_out: Vec<T>,
    pub hf: Vec<T>,
    pub inv_f: Vec<T>,
    /// `n × vocab`.
    pub logits: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// `(input, output)` buffers of a linear layer, as cached.
    pub fn linear_io(&self, id: LinearId) -> (&[T], &[T]) {
        let b = &self.blocks[id.block];
        match id.kind {
            LinearKind::Q => (&b.a, &b.q),
            LinearKind::K => (&b.a, &b.k),
            LinearKind::V => (&b.a, &b.v),
            LinearKind::Out => (&b.ctx, &b.o),
            LinearKind::Up => (&b.m, &b.u),
            LinearKind::Down => (&b.z, &b.dn),
        }
    }
}

fn to_matrix<T: Real>(v: &[T], rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec_unchecked(rows, cols, v.iter().map(|x| x.as_f64() as f32).collect())
}

impl ForwardCache<f32> {
    pub fn linear_input(&self, id: LinearId) -> Matrix {
        let (x, _) = self.linear_io(id);
        to_matrix(x, self.n, x.len() / self.n.max(1))
    }

    pub fn linear_output(&self, id: LinearId) -> Matrix {
        let (_, y) = self.linear_io(id);
        to_matrix(y, self.n, y.len() / self.n.max(1))
    }

    pub fn block_output(&self, block: usize) -> Matrix {
        let h = match self.blocks.get(block + 1) {
            Some(next) => &next.h_in,
            None => &self.h_out,
        };
        to_matrix(h, self.n, h.len() / self.n.max(1))
    }

    pub fn logits_matrix(&self) -> Matrix {
        to_matrix(&self.logits, self.n, self.logits.len() / self.n.max(1))
    }
}

fn apply_linear<T: Real>(
    hooks: &Hooks<'_>,
    id: LinearId,
    x: &[T],
    w: &[T],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let mut y = match hooks.transforms.and_then(|t| t[id.index()].as_ref()) {
        None => linear_fwd(x, w, n, din, dout),
        Some(tr) => {
            let mut xs: Vec<f32> = x.iter().map(|v| v.as_f64() as f32).collect();
            for row in xs.chunks_exact_mut(din) {
                for (v, s) in row.iter_mut().zip(&tr.inv_scale) {
                    *v *= s;
                }
            }
            if let Some(spec) = &tr.act_spec {
                let m = Matrix::from_vec_unchecked(n, din, xs);
                xs = fake_quant(&m, spec).expect("activation spec validated at model build").into_data();
            }
            let xt: Vec<T> = xs.iter().map(|v| T::of(*v as f64)).collect();
            linear_fwd(&xt, w, n, din, dout)
        }
    };
    if let Some(p) = hooks.perturb.filter(|p| p.layer == id) {
        y[p.row * dout + p.col] += T::of(p.delta);
    }
    y
}

pub(crate) fn forward_impl<T: Real>(
    cfg: &ModelConfig,
    off: &Offsets,
    p: &[T],
    ids: &[u16],
    hooks: Hooks<'_>,
) -> ForwardCache<T> {
    let n = ids.len();
    let (d, hd, vocab) = (cfg.d_model, cfg.d_hidden, cfg.vocab);
    let eps = T::of(cfg.norm_eps as f64);
    let mut h = alloc::vec![T::zero(); n * d];
    for (t, &id) in ids.iter().enumerate() {
        let e = &p[off.tok + id as usize * d..off.tok + (id as usize + 1) * d];
        let pe = &p[off.pos + t * d..off.pos + (t + 1) * d];
        for i in 0..d {
            h[t * d + i] = e[i] + pe[i];
        }
    }
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for (b, bo) in off.blocks.iter().enumerate() {
        let lid = |kind| LinearId::new(b, kind);
        let h_in = h;
        let (a, inv1) = rmsnorm_fwd(&h_in, &p[bo.norm1..bo.norm1 + d], n, d, eps);
        let q = apply_linear(&hooks, lid(LinearKind::Q), &a, &p[bo.wq..], n, d, d);
        let k = apply_linear(&hooks, lid(LinearKind::K), &a, &p[bo.wk..], n, d, d);
        let v = apply_linear(&hooks, lid(LinearKind::V), &a, &p[bo.wv..], n, d, d);

        // causal single-head attention; probabilities stored n × n, zero above the diagonal
        let mut probs = alloc::vec![T::zero(); n * n];
        let mut ctx = alloc::vec![T::zero(); n * d];
        for t in 0..n {
            let qt = &q[t * d..(t + 1) * d];
            let row = &mut probs[t * n..t * n + t + 1];
            let mut mx = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qt, &k[j * d..(j + 1) * d]) * scale;
                mx = mx.max(*s);
            }
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            for (j, s) in row.iter_mut().enumerate() {
                *s /= z;
                axpy(&mut ctx[t * d..(t + 1) * d], *s, &v[j * d..(j + 1) * d]);
            }
        }
        let o = apply_linear(&hooks, lid(LinearKind::Out), &ctx, &p[bo.wo..], n, d, d);
        let h_mid: Vec<T> = h_in.iter().zip(&o).map(|(x, y)| *x + *y).collect();
        let (m, inv2) = rmsnorm_fwd(&h_mid, &p[bo.norm2..bo.norm2 + d], n, d, eps);
        let u = apply_linear(&hooks, lid(LinearKind::Up), &m, &p[bo.up..], n, d, hd);
        let z: Vec<T> = u.iter().map(|v| gelu(*v)).collect();
        let dn = apply_linear(&hooks, lid(LinearKind::Down), &z, &p[bo.down..], n, hd, d);
        h = h_mid.iter().zip(&dn).map(|(x, y)| *x + *y).collect();
        blocks.push(BlockCache { h_in, a, inv1, q, k, v, p: probs, ctx, o, h_mid, m, inv2, u, z, dn });
    }
    let (hf, inv_f) = rmsnorm_fwd(&h, &p[off.final_norm..off.final_norm + d], n, d, eps);
    let logits = linear_fwd(&hf, &p[off.head..], n, d, vocab);
    ForwardCache { n, ids: ids.to_vec(), blocks, h_out: h, hf, inv_f, logits }
}

/// Mean cross-entropy over the `(position, target)` pairs.
pub fn cross_entropy<T: Real>(logits: &[T], vocab: usize, targets: &[(usize, u16)]) -> T {
    let mut total = T::zero();
    for &(pos, tgt) in targets {
        let row = &logits[pos * vocab..(pos + 1) * vocab];
        let mx = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let lse = row.iter().fold(T::zero(), |s, v| s + (*v - mx).exp()).ln() + mx;
        total += lse - row[tgt as usize];
    }
    total / T::of(targets.len() as f64)
}

/// Gradients of one sample's loss.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    /// Same flat layout as the model parameters.
    pub params: Vec<T>,
    /// `∂L/∂Y` for every linear layer, indexed by [`LinearId::index`], each `n × out`.
    pub linear_out: Vec<Vec<T>>,
    /// `∂L/∂h` at the residual-stream input of each block, `n × d`.
    pub block_in: Vec<Vec<T>>,
}

pub(crate) fn backward_impl<T: Real>(
    cfg: &ModelConfig,
    off: &Offsets,
    p: &[T],
    c: &ForwardCache<T>,
    targets: &[(usize, u16)],
) -> Grads<T> {
    let n = c.n;
    let (d, hd, vocab) = (cfg.d_model, cfg.d_hidden, cfg.vocab);
    let mut gp = alloc::vec![T::zero(); p.len()];
    let mut linear_out: Vec<Vec<T>> = alloc::vec![Vec::new(); cfg.n_linear()];
    let mut block_in: Vec<Vec<T>> = alloc::vec![Vec::new(); cfg.n_blocks];

    let mut dlogits = alloc::vec![T::zero(); n * vocab];
    let inv_count = T::one() / T::of(targets.len() as f64);
    for &(pos, tgt) in targets {
        let row = &c.logits[pos * vocab..(pos + 1) * vocab];
        let mx = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let z = row.iter().fold(T::zero(), |s, v| s + (*v - mx).exp());
        let drow = &mut dlogits[pos * vocab..(pos + 1) * vocab];
        for (dv, v) in drow.iter_mut().zip(row) {
            *dv += (*v - mx).exp() / z * inv_count;
        }
        drow[tgt as usize] -= inv_count;
    }
    let dhf = linear_bwd(&dlogits, &c.hf, &p[off.head..], &mut gp[off.head..off.head + vocab * d], n, d, vocab);
    let mut dh = rmsnorm_bwd(
        &dhf,
        &c.h_out,
        &p[off.final_norm..off.final_norm + d],
        &c.inv_f,
        &mut gp[off.final_norm..off.final_norm + d],
        n,
        d,
    );

    let scale = T::one() / T::of(d as f64).sqrt();
    for (b, bo) in off.blocks.iter().enumerate().rev() {
        let bc = &c.blocks[b];
        let lid = |kind| LinearId::new(b, kind).index();

        // h = h_mid + down(gelu(up(norm2(h_mid))))
        let ddn = dh.clone();
        let dz = linear_bwd(&ddn, &bc.z, &p[bo.down..], &mut gp[bo.down..bo.down + d * hd], n, hd, d);
        linear_out[lid(LinearKind::Down)] = ddn;
        let du: Vec<T> = dz.iter().zip(&bc.u).map(|(g, u)| *g * gelu_grad(*u)).collect();
        let dm = linear_bwd(&du, &bc.m, &p[bo.up..], &mut gp[bo.up..bo.up + hd * d], n, d, hd);
        linear_out[lid(LinearKind::Up)] = du;
        let dmid = rmsnorm_bwd(
            &dm,
            &bc.h_mid,
            &p[bo.norm2..bo.norm2 + d],
            &bc.inv2,
            &mut gp[bo.norm2..bo.norm2 + d],
            n,
            d,
        );
        let dh_mid: Vec<T> = dh.iter().zip(&dmid).map(|(a, b)| *a + *b).collect();

        // h_mid = h_in + out(attn(norm1(h_in)))
        let do_ = dh_mid.clone();
        let dctx = linear_bwd(&do_, &bc.ctx, &p[bo.wo..], &mut gp[bo.wo..bo.wo + d * d], n, d, d);
        linear_out[lid(LinearKind::Out)] = do_;

        let mut dq = alloc::vec![T::zero(); n * d];
        let mut dk = alloc::vec![T::zero(); n * d];
        let mut dv = alloc::vec![T::zero(); n * d];
        let mut dprob = alloc::vec![T::zero(); n];
        for t in 0..n {
            let dct = &dctx[t * d..(t + 1) * d];
            let prow = &bc.p[t * n..t * n + t + 1];
            let mut weighted = T::zero();
            for j in 0..=t {
                dprob[j] = dot(dct, &bc.v[j * d..(j + 1) * d]);
                weighted += prow[j] * dprob[j];
                axpy(&mut dv[j * d..(j + 1) * d], prow[j], dct);
            }
            for j in 0..=t {
                let ds = prow[j] * (dprob[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                axpy(&mut dq[t * d..(t + 1) * d], ds, &bc.k[j * d..(j + 1) * d]);
                axpy(&mut dk[j * d..(j + 1) * d], ds, &bc.q[t * d..(t + 1) * d]);
            }
        }
        let mut da = linear_bwd(&dq, &bc.a, &p[bo.wq..], &mut gp[bo.wq..bo.wq + d * d], n, d, d);
        let dak = linear_bwd(&dk, &bc.a, &p[bo.wk..], &mut gp[bo.wk..bo.wk + d * d], n, d, d);
        let dav = linear_bwd(&dv, &bc.a, &p[bo.wv..], &mut gp[bo.wv..bo.wv + d * d], n, d, d);
        for ((x, y), z) in da.iter_mut().zip(&dak).zip(&dav) {
            *x += *y + *z;
        }
        linear_out[lid(LinearKind::Q)] = dq;
        linear_out[lid(LinearKind::K)] = dk;
        linear_out[lid(LinearKind::V)] = dv;
        let din = rmsnorm_bwd(
            &da,
            &bc.h_in,
            &p[bo.norm1..bo.norm1 + d],
            &bc.inv1,
            &mut gp[bo.norm1..bo.norm1 + d],
            n,
            d,
        );
        dh = dh_mid.iter().zip(&din).map(|(a, b)| *a + *b).collect();
        block_in[b] = dh.clone();
    }

    for (t, &id) in c.ids.iter().enumerate() {
        let g = &dh[t * d..(t + 1) * d];
        let te = off.tok + id as usize * d;
        for i in 0..d {
            gp[te + i] += g[i];
            gp[off.pos + t * d + i] += g[i];
        }
    }
    Grads { params: gp, linear_out, block_in }
}

/// Greedy exact match from one teacher-forced pass: the argmax at every target
/// position equals its target. Greedy decoding feeds back its own predictions,
/// which coincide with the teacher inputs exactly while every earlier
/// prediction is right, so the two criteria agree.
pub fn all_targets_argmax<T: Real>(logits: &[T], vocab: usize, targets: &[(usize, u16)]) -> bool {
    targets.iter().all(|&(pos, tgt)| {
        let row = &logits[pos * vocab..(pos + 1) * vocab];
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best == tgt as usize
    })
}
