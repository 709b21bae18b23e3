//! Raw forward/backward kernels over row-major NCHW slices.
//!
//! Every function here is shape-checked by its caller; the kernels index
//! without further validation.

use crate::error::{Axis, ShapeError};

use super::{conv_out, Scalar};

/// Convolution algorithm. `Direct` is the loop-nest reference; `Im2col` lowers
/// to a matrix multiply and must agree with it within 1e-5 relative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

/// Resolved geometry of a dense 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        x: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, ShapeError> {
        let [batch, cin, h, w] = super::dims4(x, op)?;
        let [cout, wc, kh, kw] = super::dims4(weight, op)?;
        if wc != cin {
            return Err(ShapeError::Mismatch {
                op,
                axis: Axis::Channel,
                expected: cin,
                found: wc,
            });
        }
        if kh != kw {
            return Err(ShapeError::Mismatch {
                op,
                axis: Axis::Width,
                expected: kh,
                found: kw,
            });
        }
        if stride == 0 {
            return Err(ShapeError::Argument {
                op,
                msg: "stride must be positive".into(),
            });
        }
        check_window(op, h, w, kh, pad)?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: conv_out(h, kh, stride, pad),
            wo: conv_out(w, kh, stride, pad),
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.ho * self.wo * self.cin * self.k * self.k) as u64
    }
}

pub(crate) fn check_window(
    op: &'static str,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Result<(), ShapeError> {
    if h + 2 * pad < k {
        return Err(ShapeError::TooSmall {
            op,
            axis: Axis::Height,
            extent: h,
            kernel: k,
            padding: pad,
        });
    }
    if w + 2 * pad < k {
        return Err(ShapeError::TooSmall {
            op,
            axis: Axis::Width,
            extent: w,
            kernel: k,
            padding: pad,
        });
    }
    Ok(())
}

/// Reference cross-correlation: for each output element, accumulate over
/// (channel, ky, kx) in ascending order, then add the bias.
pub fn conv2d_direct<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.cout * g.ho * g.wo];
    let (h, wd, k) = (g.h as isize, g.w as isize, g.k);
    for b in 0..g.batch {
        for n in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for c in 0..g.cin {
                        let xplane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                        let wk = &w[(n * g.cin + c) * k * k..][..k * k];
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= wd {
                                    continue;
                                }
                                acc += xplane[(iy * wd + ix) as usize] * wk[ky * k + kx];
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias[n];
                    }
                    out[((b * g.cout + n) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Unfold one image `[C, H, W]` into `[C*k*k, Ho*Wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, xb: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &xb[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    if s == 1 {
                        // valid ox range: 0 <= ox + kx - p < w
                        let off = kx as isize - p;
                        let lo = (-off).clamp(0, g.wo as isize) as usize;
                        let hi = (g.w as isize - off).clamp(0, g.wo as isize) as usize;
                        dst[..lo].fill(T::zero());
                        if hi > lo {
                            let a = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                        }
                        dst[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold `[C*k*k, Ho*Wo]` back into an image gradient, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dxb: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dxb[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.wo..][..g.wo];
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution lowered to `W[N, Ckk] x cols[Ckk, HoWo]` per image.
pub fn conv2d_im2col<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ckk = g.cin * g.k * g.k;
    let mut out = vec![T::zero(); g.batch * g.cout * hw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
        let ob = &mut out[b * g.cout * hw..][..g.cout * hw];
        if let Some(bias) = bias {
            for (n, row) in ob.chunks_exact_mut(hw).enumerate() {
                row.fill(bias[n]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            ckk,
            hw,
            T::one(),
            w,
            ckk as isize,
            1,
            src,
            hw as isize,
            1,
            beta,
            ob,
            hw as isize,
            1,
        );
    }
    out
}

pub fn conv2d_forward<T: Scalar>(
    algo: ConvAlgo,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    match algo {
        ConvAlgo::Direct => conv2d_direct(g, x, w, bias),
        ConvAlgo::Im2col => conv2d_im2col(g, x, w, bias),
    }
}

/// Gradients of a convolution: `(dx, dw, dbias)`. `dx` is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = g.ho * g.wo;
    let ckk = g.cin * g.k * g.k;
    let chw = g.cin * g.h * g.w;
    // Weight and bias gradients are reduced in double precision: after a
    // training-mode batch norm `dy` sums to ~0 per channel, so a
    // single-precision reduction over positions cancels catastrophically.
    let mut dw = vec![0.0f64; if need_dw { g.cout * ckk } else { 0 }];
    let mut db = vec![0.0f64; g.cout];
    let mut dy64 = Vec::new();
    let mut src64 = Vec::new();
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * chw]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for b in 0..g.batch {
        let xb = &x[b * chw..][..chw];
        let dyb = &dy[b * g.cout * hw..][..g.cout * hw];
        for (n, row) in dyb.chunks_exact(hw).enumerate() {
            db[n] += row.iter().map(|v| v.f64()).sum::<f64>();
        }
        if need_dw {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            dy64.clear();
            dy64.extend(dyb.iter().map(|v| v.f64()));
            src64.clear();
            src64.extend(src.iter().map(|v| v.f64()));
            // dW[N, Ckk] += dY[N, HW] * cols^T
            f64::gemm(
                g.cout,
                hw,
                ckk,
                1.0,
                &dy64,
                hw as isize,
                1,
                &src64,
                1,
                hw as isize,
                1.0,
                &mut dw,
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * chw..][..chw];
            if pointwise {
                // dX[C, HW] = W^T[C, N] * dY[N, HW]
                T::gemm(
                    g.cin,
                    g.cout,
                    hw,
                    T::one(),
                    w,
                    1,
                    ckk as isize,
                    dyb,
                    hw as isize,
                    1,
                    T::zero(),
                    dxb,
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    ckk,
                    g.cout,
                    hw,
                    T::one(),
                    w,
                    1,
                    ckk as isize,
                    dyb,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    hw as isize,
                    1,
                );
                col2im(g, &cols, dxb);
            }
        }
    }
    (
        dx,
        dw.into_iter().map(T::of).collect(),
        db.into_iter().map(T::of).collect(),
    )
}

/// Geometry of a per-channel (depthwise) convolution whose output channel `q`
/// reads input channel `map[q]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthwiseGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl DepthwiseGeom {
    pub fn new(
        op: &'static str,
        x: &[usize],
        weight: &[usize],
        map: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, ShapeError> {
        let [batch, cin, h, w] = super::dims4(x, op)?;
        let [cout, one, kh, kw] = super::dims4(weight, op)?;
        if one != 1 {
            return Err(ShapeError::Mismatch {
                op,
                axis: Axis::Dim(1),
                expected: 1,
                found: one,
            });
        }
        if kh != kw {
            return Err(ShapeError::Mismatch {
                op,
                axis: Axis::Width,
                expected: kh,
                found: kw,
            });
        }
        if map.len() != cout {
            return Err(ShapeError::Mismatch {
                op,
                axis: Axis::Channel,
                expected: cout,
                found: map.len(),
            });
        }
        if let Some(&bad) = map.iter().find(|&&c| c >= cin) {
            return Err(ShapeError::Mismatch {
                op,
                axis: Axis::Channel,
                expected: cin,
                found: bad + 1,
            });
        }
        if stride == 0 {
            return Err(ShapeError::Argument {
                op,
                msg: "stride must be positive".into(),
            });
        }
        check_window(op, h, w, kh, pad)?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: conv_out(h, kh, stride, pad),
            wo: conv_out(w, kh, stride, pad),
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.ho * self.wo * self.k * self.k) as u64
    }
}

pub fn depthwise_forward<T: Scalar>(g: &DepthwiseGeom, x: &[T], w: &[T], map: &[usize]) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let (h, wd) = (g.h as isize, g.w as isize);
    let mut out = vec![T::zero(); g.batch * g.cout * g.ho * g.wo];
    for b in 0..g.batch {
        for (q, &c) in map.iter().enumerate() {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wk = &w[q * k * k..][..k * k];
            let o = &mut out[(b * g.cout + q) * g.ho * g.wo..][..g.ho * g.wo];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    for oy in 0..g.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let dst = &mut o[oy * g.wo..][..g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < wd {
                                *d += wv * src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    g: &DepthwiseGeom,
    x: &[T],
    w: &[T],
    map: &[usize],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let (h, wd) = (g.h as isize, g.w as isize);
    // Weight gradients are reduced in double precision (see `conv2d_backward`).
    let mut dw = vec![0.0f64; g.cout * k * k];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for b in 0..g.batch {
        for (q, &c) in map.iter().enumerate() {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let dyq = &dy[(b * g.cout + q) * g.ho * g.wo..][..g.ho * g.wo];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[q * k * k + ky * k + kx];
                    let mut acc = 0.0f64;
                    for oy in 0..g.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let row = iy as usize * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= wd {
                                continue;
                            }
                            let gy = dyq[oy * g.wo + ox];
                            acc += gy.f64() * plane[row + ix as usize].f64();
                            if let Some(dx) = dx.as_mut() {
                                dx[(b * g.cin + c) * g.h * g.w + row + ix as usize] += gy * wv;
                            }
                        }
                    }
                    dw[q * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
    (dx, dw.into_iter().map(T::of).collect())
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Biased batch variance (used for normalization).
    pub var: Vec<T>,
    pub invstd: Vec<T>,
}

pub fn batch_norm_train<T: Scalar>(
    dims: [usize; 4],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, BnStats<T>) {
    let [b, c, h, w] = dims;
    let hw = h * w;
    // Statistics are accumulated in double precision: a single-precision
    // two-pass variance loses most of its digits when |mean| >> std.
    let m = (b * hw) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for bi in 0..b {
            for &xv in &x[(bi * c + ch) * hw..][..hw] {
                let d = xv.f64() - mu;
                v += d * d;
            }
        }
        mean[ch] = T::of(mu);
        var[ch] = T::of(v / m);
    }
    let invstd: Vec<T> = var.iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let (mu, is, g, be) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            let off = (bi * c + ch) * hw;
            for (yv, &xv) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *yv = (xv - mu) * is * g + be;
            }
        }
    }
    (y, BnStats { mean, var, invstd })
}

/// Inference-mode batch norm with fixed statistics. Returns the output and the
/// per-channel inverse standard deviation.
pub fn batch_norm_eval<T: Scalar>(
    dims: [usize; 4],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let [b, c, h, w] = dims;
    let hw = h * w;
    let invstd: Vec<T> = var.iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let scale = invstd[ch] * gamma[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let off = (bi * c + ch) * hw;
            for (yv, &xv) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *yv = xv * scale + shift;
            }
        }
    }
    (y, invstd)
}

/// Backward of batch norm. With `batch_stats` the statistics are functions of
/// `x`; otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    dims: [usize; 4],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    invstd: &[T],
    dy: &[T],
    batch_stats: bool,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let [b, c, h, w] = dims;
    let hw = h * w;
    let m = (b * hw) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    // Reductions and the batch-statistics correction run in double precision
    // to avoid cancellation in `m * dy - sum(dy) - xhat * sum(dy * xhat)`.
    let mut sums = vec![(0.0f64, 0.0f64); c];
    for ch in 0..c {
        let (mu, is) = (mean[ch].f64(), invstd[ch].f64());
        let (mut sg, mut sb) = (0.0, 0.0);
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for (&g, &xv) in dy[off..off + hw].iter().zip(&x[off..off + hw]) {
                sb += g.f64();
                sg += g.f64() * (xv.f64() - mu) * is;
            }
        }
        sums[ch] = (sg, sb);
        dgamma[ch] = T::of(sg);
        dbeta[ch] = T::of(sb);
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        for ch in 0..c {
            let (mu, is, g) = (mean[ch].f64(), invstd[ch].f64(), gamma[ch].f64());
            let (sg, sb) = sums[ch];
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                let dst = &mut dx[off..off + hw];
                if batch_stats {
                    let k = g * is / m;
                    for ((d, &gy), &xv) in dst.iter_mut().zip(&dy[off..off + hw]).zip(&x[off..off + hw]) {
                        let xhat = (xv.f64() - mu) * is;
                        *d = T::of(k * (m * gy.f64() - sb - xhat * sg));
                    }
                } else {
                    let k = T::of(g * is);
                    for (d, &gy) in dst.iter_mut().zip(&dy[off..off + hw]) {
                        *d = k * gy;
                    }
                }
            }
        }
        dx
    });
    (dx, dgamma, dbeta)
}

/// Max pooling with implicit `-inf` padding. Returns outputs and the flat
/// input-plane index of each window's maximum (first maximum on ties).
pub fn maxpool_forward<T: Scalar>(
    dims: [usize; 4],
    x: &[T],
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let [b, c, h, w] = dims;
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut arg = vec![0u32; out.len()];
    // Separable: row max then column max, tracking argmax indices.
    let mut rowmax = vec![T::zero(); h * wo];
    let mut rowarg = vec![0u32; h * wo];
    for plane in 0..b * c {
        let xp = &x[plane * h * w..][..h * w];
        for y in 0..h {
            for ox in 0..wo {
                let start = (ox * stride) as isize - pad as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + k as isize) as usize).min(w);
                let mut best = T::neg_infinity();
                let mut bi = lo;
                for ix in lo..hi {
                    let v = xp[y * w + ix];
                    if v > best {
                        best = v;
                        bi = ix;
                    }
                }
                rowmax[y * wo + ox] = best;
                rowarg[y * wo + ox] = (y * w + bi) as u32;
            }
        }
        let op = &mut out[plane * ho * wo..][..ho * wo];
        let ap = &mut arg[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let start = (oy * stride) as isize - pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + k as isize) as usize).min(h);
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut ba = 0u32;
                for iy in lo..hi {
                    let v = rowmax[iy * wo + ox];
                    if v > best {
                        best = v;
                        ba = rowarg[iy * wo + ox];
                    }
                }
                op[oy * wo + ox] = best;
                ap[oy * wo + ox] = ba;
            }
        }
    }
    (out, arg, ho, wo)
}

/// Minimum over windows of `max - second max` (distinct positions).
pub fn maxpool_margin<T: Scalar>(dims: [usize; 4], x: &[T], k: usize, stride: usize, pad: usize) -> f64 {
    let [b, c, h, w] = dims;
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut margin = f64::INFINITY;
    for plane in 0..b * c {
        let xp = &x[plane * h * w..][..h * w];
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad as isize;
                let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for iy in y0.max(0)..(y0 + k as isize).min(h as isize) {
                    for ix in x0.max(0)..(x0 + k as isize).min(w as isize) {
                        let v = xp[iy as usize * w + ix as usize].f64();
                        if v > first {
                            second = first;
                            first = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if second.is_finite() {
                    margin = margin.min(first - second);
                }
            }
        }
    }
    margin
}

pub fn maxpool_backward<T: Scalar>(
    dims: [usize; 4],
    arg: &[u32],
    dy: &[T],
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let [b, c, h, w] = dims;
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let dp = &mut dx[plane * h * w..][..h * w];
        for (&a, &g) in arg[plane * ho * wo..][..ho * wo]
            .iter()
            .zip(&dy[plane * ho * wo..][..ho * wo])
        {
            dp[a as usize] += g;
        }
    }
    dx
}

pub fn upsample2x_forward<T: Scalar>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * h2 * w2];
    for plane in 0..b * c {
        let xp = &x[plane * h * w..][..h * w];
        let op = &mut out[plane * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            let src = &xp[(y / 2) * w..][..w];
            for (xo, d) in op[y * w2..][..w2].iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dims: [usize; 4], dy: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let gp = &dy[plane * h2 * w2..][..h2 * w2];
        let dp = &mut dx[plane * h * w..][..h * w];
        for y in 0..h2 {
            for xo in 0..w2 {
                dp[(y / 2) * w + xo / 2] += gp[y * w2 + xo];
            }
        }
    }
    dx
}

/// Pixel-parity offsets `(row, col)` of the four Focus sub-images, in output
/// channel-block order.
pub const FOCUS_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// `[B, C, H, W] -> [B, 4C, H/2, W/2]`; channel block `i` holds the pixels with
/// parity `FOCUS_ORDER[i]`.
pub fn focus_forward<T: Scalar>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); b * 4 * c * h2 * w2];
    for bi in 0..b {
        for (blk, &(dy, dx)) in FOCUS_ORDER.iter().enumerate() {
            for ch in 0..c {
                let xp = &x[(bi * c + ch) * h * w..][..h * w];
                let op = &mut out[((bi * 4 + blk) * c + ch) * h2 * w2..][..h2 * w2];
                for y in 0..h2 {
                    for xo in 0..w2 {
                        op[y * w2 + xo] = xp[(2 * y + dy) * w + 2 * xo + dx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`focus_forward`]; `dims` are the sliced `[B, 4C, H/2, W/2]` extents.
pub fn focus_inverse<T: Scalar>(dims: [usize; 4], y: &[T]) -> Vec<T> {
    let [b, c4, h2, w2] = dims;
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for (blk, &(dy, dx)) in FOCUS_ORDER.iter().enumerate() {
            for ch in 0..c {
                let yp = &y[((bi * 4 + blk) * c + ch) * h2 * w2..][..h2 * w2];
                let op = &mut out[(bi * c + ch) * h * w..][..h * w];
                for yy in 0..h2 {
                    for xo in 0..w2 {
                        op[(2 * yy + dy) * w + 2 * xo + dx] = yp[yy * w2 + xo];
                    }
                }
            }
        }
    }
    out
}

/// Copy channel range `[start, start+len)` of `[B, C, H, W]`.
pub fn slice_channels<T: Scalar>(dims: [usize; 4], x: &[T], start: usize, len: usize) -> Vec<T> {
    let [b, c, h, w] = dims;
    let hw = h * w;
    let mut out = Vec::with_capacity(b * len * hw);
    for bi in 0..b {
        out.extend_from_slice(&x[(bi * c + start) * hw..][..len * hw]);
    }
    out
}

/// Concatenate `[B, C_i, H, W]` parts along channels.
pub fn concat_channels<T: Scalar>(b: usize, hw: usize, parts: &[(&[T], usize)]) -> Vec<T> {
    let total: usize = parts.iter().map(|(_, c)| c).sum();
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for (data, c) in parts {
            out.extend_from_slice(&data[bi * c * hw..][..c * hw]);
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
