//! Forward and backward kernels over raw NHWC buffers.
//!
//! These are the hot loops of training. Convolutions are lowered to
//! `im2col` followed by one matrix product per batch.

use crate::error::{bail, Result};
use crate::nn::layer::Padding;
use crate::tensor::{gemm, Real};

/// Resolved geometry of one batched convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `input` is `N×H×W×C` (or `H×W×C`, read as a batch of one);
    /// `weights` is `K×K×C×F`.
    pub fn resolve(
        input: &[usize],
        weights: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (n, h, w, c) = match *input {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => bail!(Dimension, "conv2d input must be H×W×C or N×H×W×C, got {input:?}"),
        };
        let [k, k2, wc, f] = *weights else {
            bail!(Dimension, "conv2d weights must be K×K×C×F, got {weights:?}");
        };
        if k != k2 || k % 2 == 0 {
            bail!(Dimension, "conv2d kernel must be square and odd, got {k}×{k2}");
        }
        if wc != c {
            bail!(Dimension, "conv2d weights expect {wc} channels, input has {c}");
        }
        if stride == 0 {
            bail!(Config, "conv2d stride must be at least 1");
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            bail!(Dimension, "conv2d kernel {k} larger than padded input {h}×{w}");
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { n, h, w, c, k, f, stride, pad, oh, ow })
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Input columns `[lo, hi)` touched by kernel offset range at output `o`.
    fn span(&self, o: usize, extent: usize) -> (isize, usize, usize) {
        let origin = (o * self.stride) as isize - self.pad as isize;
        let lo = (-origin).max(0) as usize;
        let hi = ((extent as isize - origin).min(self.k as isize)).max(0) as usize;
        (origin, lo, hi)
    }
}

pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    for b in 0..g.n {
        for oy in 0..g.oh {
            let (y0, ky_lo, ky_hi) = g.span(oy, g.h);
            for ox in 0..g.ow {
                let (x0, kx_lo, kx_hi) = g.span(ox, g.w);
                if kx_lo >= kx_hi {
                    continue;
                }
                let row = ((b * g.oh + oy) * g.ow + ox) * plen;
                let run = (kx_hi - kx_lo) * g.c;
                for ky in ky_lo..ky_hi {
                    let iy = (y0 + ky as isize) as usize;
                    let ix = (x0 + kx_lo as isize) as usize;
                    let src = ((b * g.h + iy) * g.w + ix) * g.c;
                    let dst = row + (ky * g.k + kx_lo) * g.c;
                    cols[dst..dst + run].copy_from_slice(&x[src..src + run]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input grid.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plen = g.patch_len();
    for b in 0..g.n {
        for oy in 0..g.oh {
            let (y0, ky_lo, ky_hi) = g.span(oy, g.h);
            for ox in 0..g.ow {
                let (x0, kx_lo, kx_hi) = g.span(ox, g.w);
                if kx_lo >= kx_hi {
                    continue;
                }
                let row = ((b * g.oh + oy) * g.ow + ox) * plen;
                let run = (kx_hi - kx_lo) * g.c;
                for ky in ky_lo..ky_hi {
                    let iy = (y0 + ky as isize) as usize;
                    let ix = (x0 + kx_lo as isize) as usize;
                    let dst = ((b * g.h + iy) * g.w + ix) * g.c;
                    let src = row + (ky * g.k + kx_lo) * g.c;
                    for (d, &s) in dx[dst..dst + run].iter_mut().zip(&cols[src..src + run]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Returns the output (`rows × F`) together with the column matrix.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    weights: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let rows = g.rows();
    let mut out = Vec::with_capacity(rows * g.f);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(false, false, rows, g.f, g.patch_len(), &cols, weights, T::one(), &mut out);
    (out, cols)
}

pub fn conv2d_weight_grad<T: Real>(cols: &[T], dout: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dw = vec![T::zero(); g.patch_len() * g.f];
    gemm(true, false, g.patch_len(), g.f, g.rows(), cols, dout, T::zero(), &mut dw);
    dw
}

pub fn conv2d_input_grad<T: Real>(weights: &[T], dout: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dcols = vec![T::zero(); g.rows() * g.patch_len()];
    gemm(false, true, g.rows(), g.patch_len(), g.f, dout, weights, T::zero(), &mut dcols);
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.c];
    col2im(&dcols, g, &mut dx);
    dx
}

/// Column sums of a `rows × width` matrix.
pub fn column_sums<T: Real>(m: &[T], width: usize) -> Vec<T> {
    let mut s = vec![T::zero(); width];
    for row in m.chunks_exact(width) {
        for (a, &v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn resolve(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let (n, h, w, c) = match *input {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => bail!(Dimension, "maxpool2d input must be H×W×C or N×H×W×C, got {input:?}"),
        };
        if window == 0 || stride == 0 {
            bail!(Config, "maxpool2d window and stride must be at least 1");
        }
        if window > h || window > w {
            bail!(Dimension, "maxpool2d window {window} larger than input {h}×{w}");
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            window,
            stride,
            oh: (h - window) / stride + 1,
            ow: (w - window) / stride + 1,
        })
    }
}

/// Window maxima plus the flat input index of each winner. Windows are
/// scanned row-major and only a strictly larger value displaces the
/// current winner, so ties resolve to the first position.
pub fn maxpool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let total = g.n * g.oh * g.ow * g.c;
    let mut out = vec![T::zero(); total];
    let mut arg = vec![0usize; total];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((b * g.oh + oy) * g.ow + ox) * g.c;
                let mut first = true;
                for wy in 0..g.window {
                    for wx in 0..g.window {
                        let iy = oy * g.stride + wy;
                        let ix = ox * g.stride + wx;
                        let i = ((b * g.h + iy) * g.w + ix) * g.c;
                        for ch in 0..g.c {
                            let v = x[i + ch];
                            if first || v > out[o + ch] {
                                out[o + ch] = v;
                                arg[o + ch] = i + ch;
                            }
                        }
                        first = false;
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Routes each output gradient to its recorded argmax.
pub fn route_grad<T: Real>(dout: &[T], arg: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dout.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// Per-channel maximum over all spatial positions of each batch entry.
pub fn global_maxpool_forward<T: Real>(
    x: &[T],
    n: usize,
    spatial: usize,
    c: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); n * c];
    let mut arg = vec![0usize; n * c];
    for b in 0..n {
        let base = b * spatial * c;
        out[b * c..(b + 1) * c].copy_from_slice(&x[base..base + c]);
        for ch in 0..c {
            arg[b * c + ch] = base + ch;
        }
        for p in 1..spatial {
            let i = base + p * c;
            for ch in 0..c {
                if x[i + ch] > out[b * c + ch] {
                    out[b * c + ch] = x[i + ch];
                    arg[b * c + ch] = i + ch;
                }
            }
        }
    }
    (out, arg)
}

/// Batch statistics of a `rows × channels` matrix: mean and biased
/// variance, computed in two passes.
pub fn channel_stats<T: Real>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / channels;
    let inv = T::one() / T::from_usize(rows).unwrap();
    let mut mean = column_sums(x, channels);
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for ((v, &xi), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = xi - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    (mean, var)
}

/// Normalizes with the given statistics. Returns `(y, xhat, inv_std)`.
pub fn batchnorm_apply<T: Real>(
    x: &[T],
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = mean.len();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            let h = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    (y, xhat, inv_std)
}

/// Gradients of batch-statistics normalization: `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = dy.len() / c;
    let m = T::from_usize(rows).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (dr, hr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += dr[ch];
            dgamma[ch] += dr[ch] * hr[ch];
        }
    }
    // With dxhat = dy·γ: dx = inv_std/m · (m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)).
    let mut dx = Vec::with_capacity(dy.len());
    for (dr, hr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            let sum_dxhat = dbeta[ch] * gamma[ch];
            let sum_dxhat_xhat = dgamma[ch] * gamma[ch];
            let v = (m * dr[ch] * gamma[ch] - sum_dxhat - hr[ch] * sum_dxhat_xhat) * inv_std[ch] / m;
            dx.push(v);
        }
    }
    (dx, dgamma, dbeta)
}

/// Gradients when normalizing with fixed (running) statistics.
pub fn batchnorm_fixed_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Vec::with_capacity(dy.len());
    for (dr, hr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += dr[ch];
            dgamma[ch] += dr[ch] * hr[ch];
            dx.push(dr[ch] * gamma[ch] * inv_std[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

/// Row-wise log-sum-exp.
pub fn log_sum_exp_rows<T: Real>(logits: &[T], width: usize) -> Vec<T> {
    logits
        .chunks_exact(width)
        .map(|row| {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - max).exp()).sum();
            max + s.ln()
        })
        .collect()
}
