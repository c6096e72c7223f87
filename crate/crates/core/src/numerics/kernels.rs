//! Forward and backward kernels on raw row-major buffers.
//!
//! Batch-level work fans out through [`crate::par`]; every reduction over the
//! batch happens afterwards in index order.

use super::Scalar;
use crate::error::{ensure, Result};
use crate::par;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(crate::Error::dim(format!("conv2d input must be NCHW, got {x:?}"))),
        };
        let (o, kc, kh, kw) = match *kernel {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            _ => return Err(crate::Error::dim(format!("conv2d kernel must be OCkk, got {kernel:?}"))),
        };
        ensure!(kc == c, dim, "conv2d: kernel expects {} channels, input has {}", kc, c);
        ensure!(kh == kw, dim, "conv2d: kernel must be square, got {}x{}", kh, kw);
        ensure!(kh % 2 == 1, contract, "conv2d: kernel size must be odd, got {}", kh);
        ensure!(stride >= 1, contract, "conv2d: stride must be >= 1");
        ensure!(h + 2 * pad >= kh && w + 2 * pad >= kw, dim, "conv2d: kernel larger than padded input");
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ow` whose input column `ow*stride + kj - pad` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad as isize;
        // iw = ow*s + off in [0, w)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (self.w as isize - 1 - off).div_euclid(s) + 1;
        let lo = lo.clamp(0, self.wo as isize) as usize;
        let hi = hi.clamp(0, self.wo as isize) as usize;
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let drow = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = (lo + kj) - g.pad;
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ow, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ow * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let srow = &src[oh * g.wo..(oh + 1) * g.wo];
                    for ow in lo..hi {
                        drow[ow * g.stride + kj - g.pad] += srow[ow];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x [N,C,H,W]` with `w [O,C,k,k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let in_sz = g.c * g.h * g.w;
    let plane = g.ho * g.wo;
    let ckk = g.ckk();
    let per_image = par::map_range(g.n, |b| {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let mut out = vec![T::zero(); g.o * plane];
        if g.is_pointwise() {
            T::gemm(g.o, ckk, plane, w, false, xb, false, &mut out, false);
        } else {
            let mut cols = vec![T::zero(); ckk * plane];
            im2col(xb, g, &mut cols);
            T::gemm(g.o, ckk, plane, w, false, &cols, false, &mut out, false);
        }
        out
    });
    per_image.concat()
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = g.c * g.h * g.w;
    let plane = g.ho * g.wo;
    let ckk = g.ckk();
    let parts = par::map_range(g.n, |b| {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dyb = &dy[b * g.o * plane..(b + 1) * g.o * plane];
        let cols_owned;
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else if need_dw {
            let mut c = vec![T::zero(); ckk * plane];
            im2col(xb, g, &mut c);
            cols_owned = c;
            &cols_owned
        } else {
            &[]
        };
        let dw = need_dw.then(|| {
            let mut dw = vec![T::zero(); g.o * ckk];
            T::gemm(g.o, plane, ckk, dyb, false, cols, true, &mut dw, false);
            dw
        });
        let dx = need_dx.then(|| {
            if g.is_pointwise() {
                let mut dx = vec![T::zero(); in_sz];
                T::gemm(ckk, g.o, plane, w, true, dyb, false, &mut dx, false);
                dx
            } else {
                let mut dcols = vec![T::zero(); ckk * plane];
                T::gemm(ckk, g.o, plane, w, true, dyb, false, &mut dcols, false);
                let mut dx = vec![T::zero(); in_sz];
                col2im(&dcols, g, &mut dx);
                dx
            }
        });
        (dx, dw)
    });
    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.n * in_sz));
    let mut dw_all = need_dw.then(|| vec![T::zero(); g.o * ckk]);
    for (dx, dw) in parts {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b);
        }
    }
    (dx_all, dw_all)
}

/// Nearest-neighbour 2× upsampling of `[N*C, H, W]` planes.
pub fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    par::for_each_chunk_mut(&mut out, 4 * h * w, |p, dst| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    });
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |p, dst| {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        }
    });
    dx
}

/// Per-group statistics saved by the group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization of `x [N,C,H,W]` with per-channel affine `gamma`, `beta`.
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, GroupStats) {
    let cpg = c / groups;
    let gsize = cpg * hw;
    let stats: Vec<(f64, f64)> = par::map_range(n * groups, |i| {
        let chunk = &x[i * gsize..(i + 1) * gsize];
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / gsize as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / gsize as f64;
        (mean, 1.0 / (var + GROUP_NORM_EPS).sqrt())
    });
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, gsize, |i, dst| {
        let (mean, rstd) = stats[i];
        let g = i % groups;
        let src = &x[i * gsize..(i + 1) * gsize];
        for j in 0..cpg {
            let ch = g * cpg + j;
            let (ga, be) = (gamma[ch].as_f64(), beta[ch].as_f64());
            for p in 0..hw {
                let xhat = (src[j * hw + p].as_f64() - mean) * rstd;
                dst[j * hw + p] = T::from_f64_lossy(xhat * ga + be);
            }
        }
    });
    let (mean, rstd) = stats.into_iter().unzip();
    (out, GroupStats { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    stats: &GroupStats,
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let gsize = cpg * hw;
    let parts = par::map_range(n * groups, |i| {
        let (mean, rstd) = (stats.mean[i], stats.rstd[i]);
        let g = i % groups;
        let src = &x[i * gsize..(i + 1) * gsize];
        let dsrc = &dy[i * gsize..(i + 1) * gsize];
        let mut dgamma = vec![0.0f64; cpg];
        let mut dbeta = vec![0.0f64; cpg];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..cpg {
            let ga = gamma[g * cpg + j].as_f64();
            for p in 0..hw {
                let xhat = (src[j * hw + p].as_f64() - mean) * rstd;
                let d = dsrc[j * hw + p].as_f64();
                dgamma[j] += d * xhat;
                dbeta[j] += d;
                let dxhat = d * ga;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        let m = gsize as f64;
        let mut dx = vec![T::zero(); gsize];
        for j in 0..cpg {
            let ga = gamma[g * cpg + j].as_f64();
            for p in 0..hw {
                let xhat = (src[j * hw + p].as_f64() - mean) * rstd;
                let dxhat = dsrc[j * hw + p].as_f64() * ga;
                dx[j * hw + p] =
                    T::from_f64_lossy(rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
            }
        }
        (dx, dgamma, dbeta)
    });
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (i, (dxi, dg, db)) in parts.into_iter().enumerate() {
        dx.extend_from_slice(&dxi);
        let g = i % groups;
        for j in 0..cpg {
            dgamma[g * cpg + j] += dg[j];
            dbeta[g * cpg + j] += db[j];
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect();
    (dx, conv(dgamma), conv(dbeta))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    par::zip_chunks_mut(&mut out, x, 1 << 14, |d, s| {
        for (o, &v) in d.iter_mut().zip(s) {
            let v = v.as_f64();
            *o = T::from_f64_lossy(v * sigmoid(v));
        }
    });
    out
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    let mut out = dy.to_vec();
    par::zip_chunks_mut(&mut out, x, 1 << 14, |d, s| {
        for (o, &v) in d.iter_mut().zip(s) {
            let v = v.as_f64();
            let sg = sigmoid(v);
            *o = T::from_f64_lossy(o.as_f64() * sg * (1.0 + v * (1.0 - sg)));
        }
    });
    out
}

/// Single-head scaled dot-product self-attention over flattened positions.
///
/// `q`, `k`, `v` are `[N, C, S]`; returns the output `[N, C, S]` and the
/// row-softmax matrices `[N, S, S]` needed by the backward pass.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<T>, Vec<T>) {
    let scale = 1.0 / (c as f64).sqrt();
    let parts = par::map_range(n, |b| {
        let off = b * c * s;
        let (qb, kb, vb) = (&q[off..off + c * s], &k[off..off + c * s], &v[off..off + c * s]);
        let mut p = vec![T::zero(); s * s];
        T::gemm(s, c, s, qb, true, kb, false, &mut p, false);
        for row in p.chunks_mut(s) {
            let max = row
                .iter()
                .map(|x| x.as_f64() * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let e: Vec<f64> = row
                .iter()
                .map(|x| {
                    let z = (x.as_f64() * scale - max).exp();
                    denom += z;
                    z
                })
                .collect();
            for (r, z) in row.iter_mut().zip(e) {
                *r = T::from_f64_lossy(z / denom);
            }
        }
        let mut out = vec![T::zero(); c * s];
        T::gemm(c, s, s, vb, false, &p, true, &mut out, false);
        (out, p)
    });
    let mut out = Vec::with_capacity(n * c * s);
    let mut probs = Vec::with_capacity(n * s * s);
    for (o, p) in parts {
        out.extend_from_slice(&o);
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::from_f64_lossy(1.0 / (c as f64).sqrt());
    let parts = par::map_range(n, |b| {
        let off = b * c * s;
        let (qb, kb, vb) = (&q[off..off + c * s], &k[off..off + c * s], &v[off..off + c * s]);
        let dyb = &dy[off..off + c * s];
        let p = &probs[b * s * s..(b + 1) * s * s];
        let mut dv = vec![T::zero(); c * s];
        T::gemm(c, s, s, dyb, false, p, false, &mut dv, false);
        let mut dp = vec![T::zero(); s * s];
        T::gemm(s, c, s, dyb, true, vb, false, &mut dp, false);
        // softmax backward, folded with the 1/sqrt(C) score scale
        for (dpr, pr) in dp.chunks_mut(s).zip(p.chunks(s)) {
            let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            for (d, &pp) in dpr.iter_mut().zip(pr) {
                *d = T::from_f64_lossy(pp.as_f64() * (d.as_f64() - dot)) * scale;
            }
        }
        let mut dq = vec![T::zero(); c * s];
        T::gemm(c, s, s, kb, false, &dp, true, &mut dq, false);
        let mut dk = vec![T::zero(); c * s];
        T::gemm(c, s, s, qb, false, &dp, false, &mut dk, false);
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(n * c * s);
    let mut dk = Vec::with_capacity(n * c * s);
    let mut dv = Vec::with_capacity(n * c * s);
    for (a, b, cc) in parts {
        dq.extend_from_slice(&a);
        dk.extend_from_slice(&b);
        dv.extend_from_slice(&cc);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.o * g.ho * g.wo];
        for b in 0..g.n {
            for o in 0..g.o {
                for oh in 0..g.ho {
                    for ow in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.c {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < g.h && (iw as usize) < g.w {
                                        acc += x[((b * g.c + ci) * g.h + ih as usize) * g.w + iw as usize]
                                            * w[((o * g.c + ci) * g.k + ki) * g.k + kj];
                                    }
                                }
                            }
                        }
                        out[((b * g.o + o) * g.ho + oh) * g.wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(h, w, k, stride, pad) in &[(5, 6, 3, 1, 1), (6, 6, 3, 2, 1), (4, 4, 1, 1, 0), (7, 5, 3, 1, 0), (8, 8, 5, 1, 2)] {
            let g = ConvGeom::new(&[2, 3, h, w], &[4, 3, k, k], stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
            let got = conv2d_forward(&x, &wt, &g);
            let want = naive_conv(&x, &wt, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_non_integral_output() {
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        // strided output size rounds down
        assert_eq!(ConvGeom::new(&[1, 1, 64, 64], &[1, 1, 3, 3], 2, 1).unwrap().ho, 32);
        assert!(ConvGeom::new(&[1, 1, 4, 4], &[1, 1, 2, 2], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 2, 4, 4], &[1, 1, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(&[1, 2, 5, 4], &[1, 2, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.3).sin()).collect();
        let nc = g.ckk() * g.ho * g.wo;
        let c: Vec<f64> = (0..nc).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; nc];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (n, c, s) = (2, 3, 5);
        let q: Vec<f64> = (0..n * c * s).map(|i| (i as f64 * 0.11).sin()).collect();
        let (_, p) = attention_forward(&q, &q, &q, n, c, s);
        for row in p.chunks(s) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
