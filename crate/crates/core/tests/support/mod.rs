//! Loop-nest reference implementations for the integration tests.
//! Accumulation is in f64 and nothing here calls into the library kernels.

#![allow(dead_code)]

use daonet_core::Tensor;

pub struct Conv {
    pub stride: usize,
    pub pad: (usize, usize),
    pub groups: usize,
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &Conv) -> Tensor {
    let [n, c, h, wd] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let [o, cg, kh, kw] = [w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]];
    assert_eq!(cg * g.groups, c);
    let oh = (h + 2 * g.pad.0 - kh) / g.stride + 1;
    let ow = (wd + 2 * g.pad.1 - kw) / g.stride + 1;
    let og = o / g.groups;
    let xi = |b: usize, c_: usize, y: usize, x_: usize| x.data()[((b * c + c_) * h + y) * wd + x_] as f64;
    let wi = |o_: usize, c_: usize, i: usize, j: usize| w.data()[((o_ * cg + c_) * kh + i) * kw + j] as f64;
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for bi in 0..n {
        for oc in 0..o {
            let grp = oc / og;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc] as f64);
                    for ic in 0..cg {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y * g.stride + i) as i64 - g.pad.0 as i64;
                                let sx = (xx * g.stride + j) as i64 - g.pad.1 as i64;
                                if (0..h as i64).contains(&sy) && (0..wd as i64).contains(&sx) {
                                    acc += xi(bi, grp * cg + ic, sy as usize, sx as usize) * wi(oc, ic, i, j);
                                }
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, f) = (x.dims()[0], x.dims()[1]);
    let o = w.dims()[0];
    let mut out = Vec::with_capacity(n * o);
    for i in 0..n {
        for j in 0..o {
            let mut acc = b.map_or(0.0, |b| b.data()[j] as f64);
            for k in 0..f {
                acc += x.data()[i * f + k] as f64 * w.data()[j * f + k] as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(&[n, o], out).unwrap()
}

pub fn gap(x: &Tensor) -> Tensor {
    let [n, c, h, w] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let mut out = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let mut s = 0.0f64;
        for i in 0..h * w {
            s += x.data()[p * h * w + i] as f64;
        }
        out.push((s / (h * w) as f64) as f32);
    }
    Tensor::new(&[n, c], out).unwrap()
}

pub fn softmax_rows(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Small deterministic fill, independent of the library RNG.
pub fn lcg_tensor(dims: &[usize], seed: u64) -> Tensor {
    let n: usize = dims.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f64 / (1u64 << 24) as f64 * 2.0 - 1.0) as f32
        })
        .collect();
    Tensor::new(dims, data).unwrap()
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}
