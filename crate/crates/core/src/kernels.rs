//! Raw slice kernels behind the tape operations.
//!
//! Every kernel has a fixed, input-independent reduction order so repeated
//! calls on identical inputs are bitwise identical. The matrix product in
//! particular computes every output element as `c + (a[i,0]*b[0,j] + ... )`
//! accumulated left to right, whichever tile path handles it; an output row
//! therefore depends only on its own input row.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

const MR: usize = 8;
const NR: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Work is split into `MR × NR` tiles; ragged edges are zero-padded copies so
/// every element goes through the same accumulation loop.
pub fn gemm_acc<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let jfull = n / NR * NR;
    let tail = n - jfull;
    let bpad = if tail > 0 {
        let mut p = vec![E::ZERO; k * NR];
        for (dst, src) in p.chunks_exact_mut(NR).zip(b.chunks_exact(n)) {
            dst[..tail].copy_from_slice(&src[jfull..]);
        }
        p
    } else {
        Vec::new()
    };
    let mut apad = Vec::new();
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        let ablk: &[E] = if rows == MR {
            &a[i * k..(i + MR) * k]
        } else {
            apad.clear();
            apad.extend_from_slice(&a[i * k..m * k]);
            apad.resize(MR * k, E::ZERO);
            &apad
        };
        let mut j = 0;
        while j < jfull {
            let acc = tile(k, ablk, b, n, j);
            store_tile(&acc, c, n, i, j, rows, NR);
            j += NR;
        }
        if tail > 0 {
            let acc = tile(k, ablk, &bpad, NR, 0);
            store_tile(&acc, c, n, i, jfull, rows, tail);
        }
        i += MR;
    }
}

/// `acc[r][q] = Σ_p a[r·k + p] · b[p·ldb + j + q]`, `p` ascending.
#[inline(always)]
fn tile<E: Scalar>(k: usize, a: &[E], b: &[E], ldb: usize, j: usize) -> [[E; NR]; MR] {
    let mut acc = [[E::ZERO; NR]; MR];
    for p in 0..k {
        let bp: &[E; NR] = b[p * ldb + j..p * ldb + j + NR].try_into().unwrap();
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let av = a[r * k + p];
            for (acc_v, &bv) in acc_row.iter_mut().zip(bp) {
                *acc_v += av * bv;
            }
        }
    }
    acc
}

#[inline(always)]
fn store_tile<E: Scalar>(
    acc: &[[E; NR]; MR],
    c: &mut [E],
    n: usize,
    i: usize,
    j: usize,
    rows: usize,
    cols: usize,
) {
    for (r, acc_row) in acc.iter().enumerate().take(rows) {
        let crow = &mut c[(i + r) * n + j..(i + r) * n + j + cols];
        for (cv, &s) in crow.iter_mut().zip(acc_row) {
            *cv += s;
        }
    }
}

/// Transpose a row-major `rows × cols` matrix.
pub fn transpose<E: Scalar>(rows: usize, cols: usize, src: &[E]) -> Vec<E> {
    let mut out = vec![E::ZERO; rows * cols];
    const BLK: usize = 32;
    for r0 in (0..rows).step_by(BLK) {
        for c0 in (0..cols).step_by(BLK) {
            for r in r0..(r0 + BLK).min(rows) {
                for c in c0..(c0 + BLK).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold one `[C, H, W]` image into `[C·kh·kw, Ho·Wo]` patch columns.
pub fn im2col<E: Scalar>(g: &ConvGeom, x: &[E]) -> Vec<E> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut cols = vec![E::ZERO; g.col_rows() * ho * wo];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `[C, H, W]`.
pub fn col2im_acc<E: Scalar>(g: &ConvGeom, cols: &[E], dx: &mut [E]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax over the last `n` elements; returns the per-row logsumexp.
pub fn softmax_rows<E: Scalar>(n: usize, x: &[E], y: &mut [E]) -> Vec<E> {
    let rows = x.len() / n;
    let mut lse = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let yr = &mut y[r * n..(r + 1) * n];
        let m = lane_max(xr);
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            *yv = (xv - m).exp();
        }
        let s = lane_sum(yr);
        let inv = E::ONE / s;
        for yv in yr.iter_mut() {
            *yv *= inv;
        }
        lse.push(m + s.ln());
    }
    lse
}

const LANES: usize = 8;

/// Sum in eight interleaved partial sums, combined pairwise; a fixed order
/// that vectorizes.
pub fn lane_sum<E: Scalar>(v: &[E]) -> E {
    let mut acc = [E::ZERO; LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    for (a, &x) in acc.iter_mut().zip(chunks.remainder()) {
        *a += x;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// `Σ a_i b_i` in the same order as [`lane_sum`].
pub fn lane_dot<E: Scalar>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::ZERO; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for ((s, &p), &q) in acc.iter_mut().zip(x).zip(y) {
            *s += p * q;
        }
    }
    for ((s, &p), &q) in acc.iter_mut().zip(ca.remainder()).zip(cb.remainder()) {
        *s += p * q;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// Maximum of a non-empty slice.
pub fn lane_max<E: Scalar>(v: &[E]) -> E {
    let mut acc = [v[0]; LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = if x > *a { x } else { *a };
        }
    }
    for (a, &x) in acc.iter_mut().zip(chunks.remainder()) {
        *a = if x > *a { x } else { *a };
    }
    acc.iter().fold(acc[0], |m, &x| m.max(x))
}

/// True when no element is NaN or infinite.
#[allow(clippy::eq_op)]
pub fn all_finite<E: Scalar>(v: &[E]) -> bool {
    // x - x is 0 for finite x and NaN otherwise.
    let mut acc = [E::ZERO; LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x - x;
        }
    }
    for (a, &x) in acc.iter_mut().zip(chunks.remainder()) {
        *a += x - x;
    }
    acc.iter().all(|&a| a == E::ZERO)
}

/// Per-(sample, group) statistics for group normalization.
pub struct GroupStats<E> {
    pub mean: Vec<E>,
    pub rstd: Vec<E>,
}

/// Normalize `[B, C, H, W]` in groups of `C / groups` channels, then apply the
/// per-channel affine map.
pub fn group_norm_forward<E: Scalar>(
    shape: &[usize],
    groups: usize,
    x: &[E],
    gamma: &[E],
    beta: &[E],
    eps: E,
    y: &mut [E],
) -> GroupStats<E> {
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let cg = c / groups;
    let block = cg * hw;
    let inv_n = E::ONE / E::from_usize(block);
    let mut stats = GroupStats {
        mean: Vec::with_capacity(b * groups),
        rstd: Vec::with_capacity(b * groups),
    };
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c + g * cg) * hw;
            let xs = &x[off..off + block];
            let mut mean = E::ZERO;
            for &v in xs {
                mean += v;
            }
            mean *= inv_n;
            let mut var = E::ZERO;
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let rstd = E::ONE / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let s = off + ci * hw;
                for (yv, &xv) in y[s..s + hw].iter_mut().zip(&x[s..s + hw]) {
                    *yv = (xv - mean) * rstd * ga + be;
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    stats
}

/// Gradients of [`group_norm_forward`]. Any of the output buffers may be `None`
/// when that input does not require a gradient.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<E: Scalar>(
    shape: &[usize],
    groups: usize,
    x: &[E],
    gamma: &[E],
    stats: &GroupStats<E>,
    dy: &[E],
    mut dx: Option<&mut [E]>,
    mut dgamma: Option<&mut [E]>,
    mut dbeta: Option<&mut [E]>,
) {
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let cg = c / groups;
    let block = cg * hw;
    let inv_n = E::ONE / E::from_usize(block);
    for bi in 0..b {
        for g in 0..groups {
            let gi = bi * groups + g;
            let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
            let off = (bi * c + g * cg) * hw;
            let mut sum_dxhat = E::ZERO;
            let mut sum_dxhat_xhat = E::ZERO;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let s = off + ci * hw;
                let mut dg = E::ZERO;
                let mut db = E::ZERO;
                for (&xv, &dyv) in x[s..s + hw].iter().zip(&dy[s..s + hw]) {
                    let xhat = (xv - mean) * rstd;
                    dg += dyv * xhat;
                    db += dyv;
                    let dxhat = dyv * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if let Some(dgam) = dgamma.as_deref_mut() {
                    dgam[ch] += dg;
                }
                if let Some(dbet) = dbeta.as_deref_mut() {
                    dbet[ch] += db;
                }
            }
            if let Some(dxs) = dx.as_deref_mut() {
                let m1 = sum_dxhat * inv_n;
                let m2 = sum_dxhat_xhat * inv_n;
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let s = off + ci * hw;
                    for i in s..s + hw {
                        let xhat = (x[i] - mean) * rstd;
                        let dxhat = dy[i] * gamma[ch];
                        dxs[i] += rstd * (dxhat - m1 - xhat * m2);
                    }
                }
            }
        }
    }
}
