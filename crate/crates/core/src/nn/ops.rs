//! Forward and backward kernels on raw NCHW buffers.

use crate::par;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            h,
            w,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 unpadded convolution reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * a(m x k) * b(k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe matrices fully contained in `a`, `b` and `c`,
    // which the callers size as m*k, k*n and m*n respectively.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Tensor {
    let n = x.n();
    let (kk, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros([n, g.cout, g.ho, g.wo]);
    par::for_each_chunk(out.data_mut(), g.cout * p, |i, y| {
        let xi = x.item(i);
        let owned;
        let col: &[f32] = if g.is_pointwise() {
            xi
        } else {
            let mut buf = vec![0.0; kk * p];
            im2col(xi, g, &mut buf);
            owned = buf;
            &owned
        };
        gemm(g.cout, kk, p, weight, (kk, 1), col, (p, 1), 0.0, y);
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward(x: &Tensor, weight: &[f32], dy: &Tensor, g: &ConvGeom) -> (Tensor, Vec<f32>, Vec<f32>) {
    let n = x.n();
    let (kk, p) = (g.rows(), g.cols());
    let per_item = par::map_range(n, |i| {
        let xi = x.item(i);
        let dyi = dy.item(i);
        let owned;
        let col: &[f32] = if g.is_pointwise() {
            xi
        } else {
            let mut buf = vec![0.0; kk * p];
            im2col(xi, g, &mut buf);
            owned = buf;
            &owned
        };
        let mut dw = vec![0.0; g.cout * kk];
        gemm(g.cout, p, kk, dyi, (p, 1), col, (1, p), 0.0, &mut dw);
        let db: Vec<f32> = dyi.chunks(p).map(|r| r.iter().sum()).collect();
        let mut dx = vec![0.0; x.item_len()];
        if g.is_pointwise() {
            gemm(kk, g.cout, p, weight, (1, kk), dyi, (p, 1), 0.0, &mut dx);
        } else {
            let mut dcol = vec![0.0; kk * p];
            gemm(kk, g.cout, p, weight, (1, kk), dyi, (p, 1), 0.0, &mut dcol);
            col2im(&dcol, g, &mut dx);
        }
        (dx, dw, db)
    });
    let mut dx = Vec::with_capacity(x.numel());
    let mut dw = vec![0.0; g.cout * kk];
    let mut db = vec![0.0; g.cout];
    for (dxi, dwi, dbi) in per_item {
        dx.extend_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&dbi).for_each(|(a, b)| *a += b);
    }
    (Tensor::from_vec(x.shape(), dx).expect("conv dx shape"), dw, db)
}

/// Cached intermediates of a normalization forward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Vec<f32>,
    /// One entry per statistics group (channel for batch norm, (n, g) for group norm).
    pub inv_std: Vec<f32>,
    /// Whether the statistics came from the batch itself (they are then
    /// differentiated through).
    pub batch_stats: bool,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Batch normalization. `running` supplies eval-mode statistics; train mode
/// also returns the batch mean and unbiased variance per channel.
pub(crate) fn batch_norm_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running: Option<(&[f32], &[f32])>,
) -> (Tensor, NormCache, Option<(Vec<f32>, Vec<f32>)>) {
    let [n, c, _, _] = x.shape();
    let hw = x.plane_len();
    let m = n * hw;
    let (mean, var, batch) = match running {
        Some((rm, rv)) => (
            rm.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            rv.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            None,
        ),
        None => {
            let stats = par::map_range(c, |ch| {
                let planes = (0..n).map(|i| &x.data()[(i * c + ch) * hw..][..hw]);
                let sum: f64 = planes.clone().flatten().map(|&v| v as f64).sum();
                let mean = sum / m as f64;
                let ss: f64 = planes.flatten().map(|&v| (v as f64 - mean).powi(2)).sum();
                (mean, ss / m as f64, ss / (m.max(2) - 1) as f64)
            });
            let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
            let unbiased = stats.iter().map(|s| s.2 as f32).collect();
            let batch_mean = mean.iter().map(|&v| v as f32).collect();
            (mean, var, Some((batch_mean, unbiased)))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0f32; x.numel()];
    par::for_each_chunk(y.data_mut(), hw, |i, out| {
        let ch = i % c;
        let src = &x.data()[i * hw..][..hw];
        for (o, &v) in out.iter_mut().zip(src) {
            *o = ((v as f64 - mean[ch]) * inv_std[ch]) as f32;
        }
    });
    xhat.copy_from_slice(y.data());
    par::for_each_chunk(y.data_mut(), hw, |i, out| {
        let ch = i % c;
        out.iter_mut().for_each(|v| *v = gamma[ch] * *v + beta[ch]);
    });
    let cache = NormCache {
        xhat,
        inv_std: inv_std.iter().map(|&v| v as f32).collect(),
        batch_stats: batch.is_some(),
    };
    (y, cache, batch)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward(dy: &Tensor, gamma: &[f32], cache: &NormCache) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [n, c, _, _] = dy.shape();
    let hw = dy.plane_len();
    let m = (n * hw) as f64;
    let sums = par::map_range(c, |ch| {
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for (g, xh) in dy.data()[off..off + hw].iter().zip(&cache.xhat[off..off + hw]) {
                sdy += *g as f64;
                sdyx += *g as f64 * *xh as f64;
            }
        }
        (sdy, sdyx)
    });
    let dbeta: Vec<f32> = sums.iter().map(|s| s.0 as f32).collect();
    let dgamma: Vec<f32> = sums.iter().map(|s| s.1 as f32).collect();
    let mut dx = Tensor::zeros(dy.shape());
    par::for_each_chunk(dx.data_mut(), hw, |i, out| {
        let ch = i % c;
        let off = i * hw;
        let g = gamma[ch] as f64;
        let s = cache.inv_std[ch] as f64;
        let src = dy.data()[off..off + hw].iter().zip(&cache.xhat[off..off + hw]);
        if cache.batch_stats {
            let (sdy, sdyx) = sums[ch];
            for (o, (&d, &xh)) in out.iter_mut().zip(src) {
                *o = (g * s / m * (m * d as f64 - sdy - xh as f64 * sdyx)) as f32;
            }
        } else {
            for (o, (&d, _)) in out.iter_mut().zip(src) {
                *o = (g * s * d as f64) as f32;
            }
        }
    });
    (dx, dgamma, dbeta)
}

pub(crate) fn group_norm_forward(x: &Tensor, gamma: &[f32], beta: &[f32], groups: usize) -> (Tensor, NormCache) {
    let [n, c, _, _] = x.shape();
    let hw = x.plane_len();
    let block = c / groups * hw;
    let mut y = Tensor::zeros(x.shape());
    let mut inv = vec![0.0f32; n * groups];
    let stats = par::map_range(n * groups, |b| {
        let src = &x.data()[b * block..][..block];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / block as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / block as f64;
        (mean, 1.0 / (var + NORM_EPS).sqrt())
    });
    par::for_each_chunk(y.data_mut(), block, |b, out| {
        let (mean, s) = stats[b];
        for (o, &v) in out.iter_mut().zip(&x.data()[b * block..][..block]) {
            *o = ((v as f64 - mean) * s) as f32;
        }
    });
    for (d, s) in inv.iter_mut().zip(&stats) {
        *d = s.1 as f32;
    }
    let xhat = y.data().to_vec();
    par::for_each_chunk(y.data_mut(), hw, |i, out| {
        let ch = i % c;
        out.iter_mut().for_each(|v| *v = gamma[ch] * *v + beta[ch]);
    });
    (
        y,
        NormCache {
            xhat,
            inv_std: inv,
            batch_stats: true,
        },
    )
}

pub(crate) fn group_norm_backward(dy: &Tensor, gamma: &[f32], cache: &NormCache, groups: usize) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [n, c, _, _] = dy.shape();
    let hw = dy.plane_len();
    let block = c / groups * hw;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for i in 0..n * c {
        let off = i * hw;
        let ch = i % c;
        for (d, xh) in dy.data()[off..off + hw].iter().zip(&cache.xhat[off..off + hw]) {
            dbeta[ch] += *d as f64;
            dgamma[ch] += *d as f64 * *xh as f64;
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    let per_group = c / groups;
    par::for_each_chunk(dx.data_mut(), block, |b, out| {
        let off = b * block;
        let ch0 = (b % groups) * per_group;
        let dxhat = |j: usize| dy.data()[off + j] as f64 * gamma[ch0 + j / hw] as f64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..block {
            let d = dxhat(j);
            s1 += d;
            s2 += d * cache.xhat[off + j] as f64;
        }
        let m = block as f64;
        let s = cache.inv_std[b] as f64;
        for (j, o) in out.iter_mut().enumerate() {
            *o = (s / m * (m * dxhat(j) - s1 - cache.xhat[off + j] as f64 * s2)) as f32;
        }
    });
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}

/// Source taps `(i0, i1, frac)` for bilinear resampling without corner alignment.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub(crate) fn resize_forward(x: &Tensor, ho: usize, wo: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    if (h, w) == (ho, wo) {
        return x.clone();
    }
    let ty = axis_taps(h, ho);
    let tx = axis_taps(w, wo);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    par::for_each_chunk(out.data_mut(), ho * wo, |i, dst| {
        let src = &x.data()[i * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    });
    out
}

pub(crate) fn resize_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, ho, wo] = dy.shape();
    if (h, w) == (ho, wo) {
        return dy.clone();
    }
    let ty = axis_taps(h, ho);
    let tx = axis_taps(w, wo);
    let mut dx = Tensor::zeros([n, c, h, w]);
    par::for_each_chunk(dx.data_mut(), h * w, |i, dst| {
        let src = &dy.data()[i * ho * wo..][..ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    });
    dx
}
