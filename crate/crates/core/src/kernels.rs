//! Forward and adjoint kernels for the primitive op set.
//!
//! Every reduction runs in a fixed order with the innermost index fastest.
//! Convolution outputs accumulate over (input channel, kernel row, kernel
//! column) and add the bias last. Parallel loops split work by output plane
//! only, so each element's sum is computed by one thread in that order and
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a convolution, independent of channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return Err(Error::shape(format!(
            "non-positive output size: input {input}, pad {pad}, kernel {kernel}, stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`: the
/// positions `o` with `0 <= o*stride + k - pad < input`.
#[inline]
fn tap_range(out: usize, input: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= input - 1
    let hi = if input + pad > k { ((input + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cig: usize,
    cog: usize,
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, g: ConvGeom) -> Result<ConvDims> {
    let (n, ci, h, w) = x.nchw()?;
    let (co, cig, kh, kw) = weight.nchw()?;
    if g.groups == 0 || ci % g.groups != 0 || co % g.groups != 0 {
        return Err(Error::shape(format!("channels {ci}->{co} not divisible by groups {}", g.groups)));
    }
    if cig != ci / g.groups {
        return Err(Error::shape(format!(
            "channel mismatch: input has {ci} channels, weight expects {} per group x {} groups",
            cig, g.groups
        )));
    }
    let oh = conv_out_size(h, kh, g.pad_h, g.stride)?;
    let ow = conv_out_size(w, kw, g.pad_w, g.stride)?;
    Ok(ConvDims { n, ci, h, w, co, kh, kw, oh, ow, cig, cog: co / g.groups })
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, weight, g)?;
    if let Some(b) = bias {
        if b.dims() != [d.co] {
            return Err(Error::shape(format!("bias dims {:?}, expected [{}]", b.dims(), d.co)));
        }
    }
    let xs = x.data();
    let ws = weight.data();
    let plane = d.oh * d.ow;
    let mut out = vec![T::zero(); d.n * d.co * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, y)| {
        let (n, oc) = (idx / d.co, idx % d.co);
        let group = oc / d.cog;
        for icl in 0..d.cig {
            let ic = group * d.cig + icl;
            let xp = &xs[(n * d.ci + ic) * d.h * d.w..][..d.h * d.w];
            for ki in 0..d.kh {
                let (oy0, oy1) = tap_range(d.oh, d.h, ki, g.pad_h, g.stride);
                for kj in 0..d.kw {
                    let wv = ws[((oc * d.cig + icl) * d.kh + ki) * d.kw + kj];
                    let (ox0, ox1) = tap_range(d.ow, d.w, kj, g.pad_w, g.stride);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad_h;
                        let xrow = &xp[iy * d.w..][..d.w];
                        let yrow = &mut y[oy * d.ow..][..d.ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + kj - g.pad_w;
                            for (yv, &xv) in yrow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                                *yv = *yv + wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kj - g.pad_w;
                                yrow[ox] = yrow[ox] + wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.data()[oc];
            for v in y.iter_mut() {
                *v = *v + bv;
            }
        }
    });
    Ok(Tensor::from_parts(vec![d.n, d.co, d.oh, d.ow], out))
}

/// Adjoints of [`conv2d`] with respect to input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    g: ConvGeom,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(x, weight, g)?;
    let xs = x.data();
    let ws = weight.data();
    let gs = grad.data();
    let plane = d.oh * d.ow;

    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(idx, dxp)| {
        let (n, ic) = (idx / d.ci, idx % d.ci);
        let group = ic / d.cig;
        let icl = ic % d.cig;
        for ocl in 0..d.cog {
            let oc = group * d.cog + ocl;
            let gp = &gs[(n * d.co + oc) * plane..][..plane];
            for ki in 0..d.kh {
                let (oy0, oy1) = tap_range(d.oh, d.h, ki, g.pad_h, g.stride);
                for kj in 0..d.kw {
                    let wv = ws[((oc * d.cig + icl) * d.kh + ki) * d.kw + kj];
                    let (ox0, ox1) = tap_range(d.ow, d.w, kj, g.pad_w, g.stride);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad_h;
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kj - g.pad_w;
                            dxp[iy * d.w + ix] = dxp[iy * d.w + ix] + wv * gp[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    });

    let kernel = d.cig * d.kh * d.kw;
    let mut dw = vec![T::zero(); weight.len()];
    dw.par_chunks_mut(kernel).enumerate().for_each(|(oc, dwk)| {
        let group = oc / d.cog;
        for icl in 0..d.cig {
            let ic = group * d.cig + icl;
            for ki in 0..d.kh {
                let (oy0, oy1) = tap_range(d.oh, d.h, ki, g.pad_h, g.stride);
                for kj in 0..d.kw {
                    let (ox0, ox1) = tap_range(d.ow, d.w, kj, g.pad_w, g.stride);
                    let mut acc = T::zero();
                    for n in 0..d.n {
                        let gp = &gs[(n * d.co + oc) * plane..][..plane];
                        let xp = &xs[(n * d.ci + ic) * d.h * d.w..][..d.h * d.w];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad_h;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kj - g.pad_w;
                                acc = acc + gp[oy * d.ow + ox] * xp[iy * d.w + ix];
                            }
                        }
                    }
                    dwk[(icl * d.kh + ki) * d.kw + kj] = acc;
                }
            }
        }
    });

    let db = (0..d.co)
        .map(|oc| {
            let mut acc = T::zero();
            for n in 0..d.n {
                for &v in &gs[(n * d.co + oc) * plane..][..plane] {
                    acc = acc + v;
                }
            }
            acc
        })
        .collect();

    Ok((
        Tensor::from_parts(x.dims().to_vec(), dx),
        Tensor::from_parts(weight.dims().to_vec(), dw),
        Tensor::from_parts(vec![d.co], db),
    ))
}

/// `x · weightᵀ + bias` for `x: [N, F]`, `weight: [O, F]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, f, o) = linear_dims(x, weight)?;
    if let Some(b) = bias {
        if b.dims() != [o] {
            return Err(Error::shape(format!("bias dims {:?}, expected [{o}]", b.dims())));
        }
    }
    let (xs, ws) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(n * o);
    for i in 0..n {
        for j in 0..o {
            let mut acc = T::zero();
            for k in 0..f {
                acc = acc + xs[i * f + k] * ws[j * f + k];
            }
            if let Some(b) = bias {
                acc = acc + b.data()[j];
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

fn linear_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.dims(), weight.dims()) {
        (&[n, f], &[o, f2]) if f == f2 => Ok((n, f, o)),
        (xd, wd) => Err(Error::shape(format!("linear: input {xd:?} vs weight {wd:?}"))),
    }
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f, o) = linear_dims(x, weight)?;
    let (xs, ws, gs) = (x.data(), weight.data(), grad.data());
    let mut dx = vec![T::zero(); n * f];
    for i in 0..n {
        for k in 0..f {
            let mut acc = T::zero();
            for j in 0..o {
                acc = acc + gs[i * o + j] * ws[j * f + k];
            }
            dx[i * f + k] = acc;
        }
    }
    let mut dw = vec![T::zero(); o * f];
    for j in 0..o {
        for k in 0..f {
            let mut acc = T::zero();
            for i in 0..n {
                acc = acc + gs[i * o + j] * xs[i * f + k];
            }
            dw[j * f + k] = acc;
        }
    }
    let db = (0..o).map(|j| (0..n).fold(T::zero(), |a, i| a + gs[i * o + j])).collect();
    Ok((
        Tensor::from_parts(vec![n, f], dx),
        Tensor::from_parts(vec![o, f], dw),
        Tensor::from_parts(vec![o], db),
    ))
}

/// Views a rank-2 or rank-3 tensor as `(batch, rows, cols)`.
fn as_batched(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::shape(format!("expected rank 2 or 3, got {dims:?}"))),
    }
}

/// Batched matrix product: `[B, M, K] · [B, K, P] -> [B, M, P]` (rank 2 treated as B = 1).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, k) = as_batched(a.dims())?;
    let (bb, k2, p) = as_batched(b.dims())?;
    if ba != bb || k != k2 || a.rank() != b.rank() {
        return Err(Error::shape(format!("matmul: {:?} x {:?}", a.dims(), b.dims())));
    }
    let (xs, ys) = (a.data(), b.data());
    let mut out = vec![T::zero(); ba * m * p];
    for bi in 0..ba {
        let xa = &xs[bi * m * k..][..m * k];
        let yb = &ys[bi * k * p..][..k * p];
        let o = &mut out[bi * m * p..][..m * p];
        for i in 0..m {
            for j in 0..p {
                let mut acc = T::zero();
                for t in 0..k {
                    acc = acc + xa[i * k + t] * yb[t * p + j];
                }
                o[i * p + j] = acc;
            }
        }
    }
    let dims = if a.rank() == 2 { vec![m, p] } else { vec![ba, m, p] };
    Ok(Tensor::from_parts(dims, out))
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, r, c) = as_batched(x.dims())?;
    let xs = x.data();
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for j in 0..c {
            for i in 0..r {
                out.push(xs[(bi * r + i) * c + j]);
            }
        }
    }
    let dims = if x.rank() == 2 { vec![c, r] } else { vec![b, c, r] };
    Ok(Tensor::from_parts(dims, out))
}

fn axis_split(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {dims:?}")));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.dims(), axis)?;
    let xs = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..len {
                mx = mx.max(xs[at(k)]);
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = (xs[at(k)] - mx).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// Softmax adjoint from the forward output `y`: `dx = y * (g - sum(g * y))`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.dims(), axis)?;
    let (ys, gs) = (y.data(), grad.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot = dot + gs[at(k)] * ys[at(k)];
            }
            for k in 0..len {
                dx[at(k)] = ys[at(k)] * (gs[at(k)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.dims().to_vec(), dx))
}

/// Mean over H×W: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let hw = h * w;
    let scale = T::of_f64(hw as f64);
    let out = x.data().chunks_exact(hw).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / scale).collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Scalar>(x_dims: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let hw = x_dims[2] * x_dims[3];
    let scale = T::of_f64(hw as f64);
    let mut out = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g / scale, hw));
    }
    Tensor::from_parts(x_dims.to_vec(), out)
}

/// Output position of input channel `c` under a `groups`-way shuffle of `channels`.
#[inline]
pub fn shuffle_position(c: usize, channels: usize, groups: usize) -> usize {
    let per = channels / groups;
    (c % per) * groups + c / per
}

pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("channel_shuffle: {c} channels not divisible by {groups} groups")));
    }
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let dst = shuffle_position(ch, c, groups);
            out[(b * c + dst) * hw..][..hw].copy_from_slice(&xs[(b * c + ch) * hw..][..hw]);
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

pub fn channel_unshuffle<T: Scalar>(y: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.nchw()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("channel_shuffle: {c} channels not divisible by {groups} groups")));
    }
    let hw = h * w;
    let ys = y.data();
    let mut out = vec![T::zero(); y.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = shuffle_position(ch, c, groups);
            out[(b * c + ch) * hw..][..hw].copy_from_slice(&ys[(b * c + src) * hw..][..hw]);
        }
    }
    Ok(Tensor::from_parts(y.dims().to_vec(), out))
}

/// Slab view along axis 1: `(outer, axis_len, inner)`.
fn channel_split(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(Error::shape(format!("need rank >= 2 for channel ops, got {dims:?}")));
    }
    axis_split(dims, 1)
}

/// Concatenates along axis 1; all other dims must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let mut dims = first.dims().to_vec();
    let (outer, _, inner) = channel_split(&dims)?;
    let mut total = 0;
    for p in parts {
        let pd = p.dims();
        if pd.len() != dims.len() || pd[0] != dims[0] || pd[2..] != dims[2..] {
            return Err(Error::shape(format!("concat: {:?} vs {:?}", first.dims(), pd)));
        }
        total += pd[1];
    }
    dims[1] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let c = p.dims()[1];
            out.extend_from_slice(&p.data()[o * c * inner..][..c * inner]);
        }
    }
    Ok(Tensor::from_parts(dims, out))
}

/// Channels `[start, start + len)` along axis 1.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, c, inner) = channel_split(x.dims())?;
    if len == 0 || start + len > c {
        return Err(Error::shape(format!("narrow [{start}, {}) outside {c} channels", start + len)));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * c + start) * inner..][..len * inner]);
    }
    let mut dims = x.dims().to_vec();
    dims[1] = len;
    Ok(Tensor::from_parts(dims, out))
}

/// Adjoint of [`narrow_channels`]: zero-pads `grad` back to `x_dims`.
pub fn narrow_channels_backward<T: Scalar>(x_dims: &[usize], grad: &Tensor<T>, start: usize) -> Tensor<T> {
    let (outer, c, inner) = channel_split(x_dims).expect("validated in forward");
    let len = grad.dims()[1];
    let mut out = vec![T::zero(); outer * c * inner];
    for o in 0..outer {
        out[(o * c + start) * inner..][..len * inner].copy_from_slice(&grad.data()[o * len * inner..][..len * inner]);
    }
    Tensor::from_parts(x_dims.to_vec(), out)
}

/// `x[n, c, :, :] * s[n, c]`, or `* s[n, 0]` when `s` has one column.
pub fn mul_broadcast<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let sc = broadcast_cols(n, c, s)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(x.len());
    for (i, plane) in x.data().chunks_exact(hw).enumerate() {
        let (b, ch) = (i / c, i % c);
        let f = s.data()[b * sc + if sc == 1 { 0 } else { ch }];
        out.extend(plane.iter().map(|&v| v * f));
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

fn broadcast_cols<T: Scalar>(n: usize, c: usize, s: &Tensor<T>) -> Result<usize> {
    match *s.dims() {
        [sn, sc] if sn == n && (sc == c || sc == 1) => Ok(sc),
        _ => Err(Error::shape(format!("cannot broadcast {:?} over N={n}, C={c}", s.dims()))),
    }
}

pub fn mul_broadcast_backward<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.nchw()?;
    let sc = broadcast_cols(n, c, s)?;
    let hw = h * w;
    let mut dx = Vec::with_capacity(x.len());
    let mut ds = vec![T::zero(); s.len()];
    for (i, (xp, gp)) in x.data().chunks_exact(hw).zip(grad.data().chunks_exact(hw)).enumerate() {
        let (b, ch) = (i / c, i % c);
        let si = b * sc + if sc == 1 { 0 } else { ch };
        let f = s.data()[si];
        dx.extend(gp.iter().map(|&g| g * f));
        let mut acc = T::zero();
        for (&xv, &g) in xp.iter().zip(gp) {
            acc = acc + xv * g;
        }
        ds[si] = ds[si] + acc;
    }
    Ok((Tensor::from_parts(x.dims().to_vec(), dx), Tensor::from_parts(s.dims().to_vec(), ds)))
}

/// Nearest-neighbour 2× upsample of an NCHW tensor.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let mut out = Vec::with_capacity(x.len() * 4);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.push(plane[(y / 2) * w + xx / 2]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out))
}

pub fn upsample2x_backward<T: Scalar>(x_dims: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x_dims[2], x_dims[3]);
    let mut out = Vec::with_capacity(grad.len() / 4);
    for gp in grad.data().chunks_exact(4 * h * w) {
        for y in 0..h {
            for xx in 0..w {
                let at = |dy: usize, dx: usize| gp[(2 * y + dy) * 2 * w + 2 * xx + dx];
                out.push(at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Tensor::from_parts(x_dims.to_vec(), out)
}

/// Stride-1 max pool with `-inf` padding; returns the output and, per output
/// element, the flat in-plane index of the first maximum in scan order.
pub fn maxpool_same<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (_, _, h, w) = x.nchw()?;
    if kernel % 2 == 0 {
        return Err(Error::shape(format!("max pool kernel {kernel} must be odd")));
    }
    let pad = kernel / 2;
    let mut out = Vec::with_capacity(x.len());
    let mut arg = Vec::with_capacity(x.len());
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..h {
            for xx in 0..w {
                let mut best = T::neg_infinity();
                let mut at = 0usize;
                for iy in y.saturating_sub(pad)..(y + pad + 1).min(h) {
                    for ix in xx.saturating_sub(pad)..(xx + pad + 1).min(w) {
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            at = iy * w + ix;
                        }
                    }
                }
                out.push(best);
                arg.push(at as u32);
            }
        }
    }
    Ok((Tensor::from_parts(x.dims().to_vec(), out), arg))
}

pub fn maxpool_backward<T: Scalar>(x_dims: &[usize], arg: &[u32], grad: &Tensor<T>) -> Tensor<T> {
    let hw = x_dims[2] * x_dims[3];
    let mut out = vec![T::zero(); grad.len()];
    for (p, (gp, ap)) in grad.data().chunks_exact(hw).zip(arg.chunks_exact(hw)).enumerate() {
        let dst = &mut out[p * hw..][..hw];
        for (&g, &a) in gp.iter().zip(ap) {
            dst[a as usize] = dst[a as usize] + g;
        }
    }
    Tensor::from_parts(x_dims.to_vec(), out)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Branching keeps exp() from overflowing for large |v|.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("elementwise: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.dims().to_vec(), out))
}
