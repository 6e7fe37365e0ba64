//! The invariant suite behind `daonet check`.
//!
//! Each check reduces to one measured number and a threshold. `AtMost`
//! passes when `measured <= threshold`, `Below` when `measured < threshold`;
//! NaN never passes.

use std::time::Instant;

use serde::Serialize;

use crate::blocks::{C2f, C2fConfig, UnitKind};
use crate::dafm::{self, Dafm, DafmConfig};
use crate::dsconv::{Dsconv, DsconvConfig};
use crate::error::Result;
use crate::gradcheck::{self, Target};
use crate::kernels::{self, ConvGeom};
use crate::model::{self, Model, ModelConfig, Variant};
use crate::nn::{self, cost_of, Activation, ConvSpec, LinearSpec};
use crate::oahead::{HeadBranch, Oahead, OaheadConfig};
use crate::rng::{rand_uniform, Rng};
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    Below,
}

impl Bound {
    fn holds(self, measured: f64, threshold: f64) -> bool {
        match self {
            Bound::AtMost => measured <= threshold,
            Bound::Below => measured < threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Bound::AtMost => "<=",
            Bound::Below => "<",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    pub bound: Bound,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CheckResult {
    /// One report line. Elapsed time is shown only when recorded.
    pub fn line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} {:<44} measured={:<11} {} {}",
            self.name,
            fmt_num(self.measured),
            self.bound.symbol(),
            fmt_num(self.threshold)
        );
        if let Some(ms) = self.elapsed_ms {
            s.push_str(&format!(" ({ms} ms)"));
        }
        if let Some(e) = &self.error {
            s.push_str(&format!(" error: {e}"));
        }
        s
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-3 && v.abs() < 1e6 && v.fract() == 0.0) {
        format!("{v}")
    } else {
        format!("{v:.3e}")
    }
}

/// Deliberate faults, used to show that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Softmax without subtracting the row maximum.
    NaiveSoftmax,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub fault: Option<Fault>,
    pub timings: bool,
}

struct Ctx {
    seed: u64,
    fault: Option<Fault>,
}

impl Ctx {
    /// A stream private to one check, so adding checks never shifts another's inputs.
    fn rng(&self, name: &str) -> Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        Rng::new(self.seed ^ h)
    }
}

struct Outcome {
    measured: f64,
    threshold: f64,
    bound: Bound,
}

fn at_most(measured: f64, threshold: f64) -> Result<Outcome> {
    Ok(Outcome { measured, threshold, bound: Bound::AtMost })
}

fn below(measured: f64, threshold: f64) -> Result<Outcome> {
    Ok(Outcome { measured, threshold, bound: Bound::Below })
}

fn exact(measured: f64) -> Result<Outcome> {
    at_most(measured, 0.0)
}

type CheckFn = Box<dyn Fn(&Ctx) -> Result<Outcome>>;

fn rand(rng: &mut Rng, dims: &[usize]) -> Result<Tensor> {
    rand_uniform(rng, dims, -1.0, 1.0)
}

fn max_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b)
}

fn count(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Evaluates `f` on a fresh tape holding `store` and `inputs`; returns the values of its outputs.
fn eval<F>(store: &WeightStore, inputs: &[&Tensor], f: F) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Tape<f32>, &Params, &[Var]) -> Result<Vec<Var>>,
{
    let mut t = Tape::new();
    let p = t.bind(store);
    let xs: Vec<Var> = inputs.iter().map(|x| t.leaf((*x).clone())).collect();
    let outs = f(&mut t, &p, &xs)?;
    Ok(outs.into_iter().map(|v| t.value(v).clone()).collect())
}

fn init<M>(m: &M, seed_rng: &mut Rng, f: impl Fn(&M, &mut WeightStore, &mut Rng) -> Result<()>) -> Result<WeightStore> {
    let mut s = WeightStore::new();
    f(m, &mut s, seed_rng)?;
    Ok(s)
}

// Brute-force references, written as plainly as possible and sharing no code
// with the kernels they check.

fn oracle_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, ph: usize, pw: usize, groups: usize) -> Tensor {
    let (xd, wd) = (x.dims(), w.dims());
    let (n, ci, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (co, cig, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (wi + 2 * pw - kw) / stride + 1;
    let cog = co / groups;
    let mut out = vec![0f32; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = o / cog;
                    let mut acc = 0f32;
                    for c in 0..cig {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - ph as isize;
                                let ix = (xx * stride + j) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let ic = g * cig + c;
                                let xv = x.data()[((b_ * ci + ic) * h + iy as usize) * wi + ix as usize];
                                let wv = w.data()[((o * cig + c) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[o];
                    }
                    out[((b_ * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).expect("oracle dims")
}

fn oracle_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, f) = (x.dims()[0], x.dims()[1]);
    let o = w.dims()[0];
    let mut out = vec![0f32; n * o];
    for i in 0..n {
        for j in 0..o {
            let mut acc = 0f32;
            for k in 0..f {
                acc += x.data()[i * f + k] * w.data()[j * f + k];
            }
            out[i * o + j] = acc + b.data()[j];
        }
    }
    Tensor::new(&[n, o], out).expect("oracle dims")
}

fn oracle_gap(x: &Tensor) -> Tensor {
    let d = x.dims();
    let hw = d[2] * d[3];
    let mut out = Vec::new();
    for nc in 0..d[0] * d[1] {
        let mut s = 0f64;
        for v in &x.data()[nc * hw..(nc + 1) * hw] {
            s += *v as f64;
        }
        out.push((s / hw as f64) as f32);
    }
    Tensor::new(&[d[0], d[1]], out).expect("oracle dims")
}

fn naive_softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.dims().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let s: f32 = row.iter().map(|v| v.exp()).sum();
        for v in row.iter_mut() {
            *v = v.exp() / s;
        }
    }
    Tensor::new(x.dims(), out).expect("same dims")
}

fn row_sum_error(t: &Tensor) -> f64 {
    let n = *t.dims().last().expect("rank >= 1");
    t.data()
        .chunks(n)
        .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, nan_max)
}

/// `max` that keeps a NaN instead of discarding it.
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn tensor_core_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("rng.determinism", Box::new(|c: &Ctx| {
            let mut a = c.rng("rng");
            let mut b = c.rng("rng");
            exact(count(!rand(&mut a, &[256])?.bit_eq(&rand(&mut b, &[256])?)))
        })),
        ("rng.seed_sensitivity", Box::new(|c: &Ctx| {
            let a = rand(&mut Rng::new(c.seed), &[16])?;
            let b = rand(&mut Rng::new(c.seed.wrapping_add(1)), &[16])?;
            exact(count(a.bit_eq(&b)))
        })),
        ("rng.bounds", Box::new(|c: &Ctx| {
            let t = rand_uniform(&mut c.rng("bounds"), &[4096], -0.5, 0.5)?;
            exact(t.data().iter().filter(|&&v| !(-0.5..0.5).contains(&v)).count() as f64)
        })),
        ("backward.sum_adjoint", Box::new(|c: &Ctx| {
            let x = rand(&mut c.rng("sum"), &[2, 3, 4])?;
            let mut t = Tape::new();
            let xv = t.leaf(x);
            let l = t.sum(xv);
            let g = t.backward(l)?;
            exact(g.get(xv).map_or(f64::NAN, |g| g.data().iter().map(|&v| (v as f64 - 1.0).abs()).fold(0.0, nan_max)))
        })),
        ("backward.square_adjoint", Box::new(|c: &Ctx| {
            let x = rand(&mut c.rng("sq"), &[2, 3, 4])?;
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = t.mul(xv, xv)?;
            let l = t.sum(y);
            let g = t.backward(l)?;
            exact(g.get(xv).map_or(Ok(f64::NAN), |g| max_diff(g, &x.map(|v| 2.0 * v)))?)
        })),
        ("backward.softmax_sum_adjoint", Box::new(|c: &Ctx| {
            let x = rand(&mut c.rng("smx"), &[3, 7])?;
            let mut t = Tape::new();
            let xv = t.leaf(x);
            let s = t.softmax(xv, 1)?;
            let l = t.sum(s);
            let g = t.backward(l)?;
            at_most(g.get(xv).map_or(f64::NAN, |g| g.data().iter().map(|v| v.abs() as f64).fold(0.0, nan_max)), 1e-6)
        })),
        ("backward.rejects_bad_loss", Box::new(|_c: &Ctx| {
            let mut t: Tape<f32> = Tape::new();
            let x = t.leaf(Tensor::zeros(&[2])?);
            let mut other: Tape<f32> = Tape::new();
            let a = other.leaf(Tensor::zeros(&[1])?);
            let b = other.leaf(Tensor::zeros(&[1])?);
            let foreign = other.add(a, b)?;
            let misses = count(t.backward(x).is_ok()) + count(t.backward(foreign).is_ok());
            exact(misses)
        })),
        ("ops.purity", Box::new(|c: &Ctx| {
            let mut r = c.rng("purity");
            let m = Dafm::new("dafm", DafmConfig::new(8).with_conv_groups(2))?;
            let s = init(&m, &mut r, Dafm::init)?;
            let x = rand(&mut r, &[2, 8, 5, 5])?;
            let a = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            let b = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            exact(count(!a[0].bit_eq(&b[0])))
        })),
    ]
}

fn nn_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("softmax.normalization", Box::new(|c: &Ctx| {
            let mut r = c.rng("softmax");
            let big = rand_uniform(&mut r, &[64, 10], -1e4, 1e4)?;
            let small = rand(&mut r, &[64, 10])?;
            let mut worst: f64 = 0.0;
            for x in [&big, &small] {
                let y = match c.fault {
                    Some(Fault::NaiveSoftmax) => naive_softmax_rows(x),
                    None => kernels::softmax(x, 1)?,
                };
                let e = row_sum_error(&y);
                worst = nan_max(worst, e);
            }
            at_most(worst, 1e-6)
        })),
        ("softmax.positive", Box::new(|c: &Ctx| {
            let x = rand_uniform(&mut c.rng("softmax.pos"), &[32, 9], -10.0, 10.0)?;
            exact(kernels::softmax(&x, 1)?.data().iter().filter(|&&v| !(v > 0.0)).count() as f64)
        })),
        ("softmax.shift_invariance", Box::new(|c: &Ctx| {
            // Multiples of 2^-12 so that adding 64 is exact in f32.
            let x = rand(&mut c.rng("softmax.shift"), &[16, 6])?.map(|v| (v * 4096.0).round() / 4096.0);
            at_most(max_diff(&kernels::softmax(&x, 1)?, &kernels::softmax(&x.map(|v| v + 64.0), 1)?)?, 1e-6)
        })),
        ("softmax.examples", Box::new(|_c: &Ctx| {
            let y = kernels::softmax(&Tensor::new(&[1, 2], vec![0.0, 3f32.ln()])?, 1)?;
            let u = kernels::softmax(&Tensor::full(&[1, 5], 2.5)?, 1)?;
            let e = nan_max(max_diff(&y, &Tensor::new(&[1, 2], vec![0.25, 0.75])?)?, max_diff(&u, &Tensor::full(&[1, 5], 0.2)?)?);
            at_most(e, 1e-6)
        })),
        ("channel_shuffle.bijection", Box::new(|c: &Ctx| {
            let x = rand(&mut c.rng("shuffle"), &[2, 12, 3, 3])?;
            let mut bad = 0.0;
            for g in [1, 2, 3, 4, 6, 12] {
                let y = kernels::channel_shuffle(&x, g)?;
                bad += count(!kernels::channel_unshuffle(&y, g)?.bit_eq(&x));
                if g == 1 || g == 12 {
                    bad += count(!y.bit_eq(&x));
                }
            }
            let tags = Tensor::new(&[1, 4, 1, 1], vec![0., 1., 2., 3.])?;
            bad += count(kernels::channel_shuffle(&tags, 2)?.data() != [0., 2., 1., 3.]);
            bad += count(kernels::channel_shuffle(&x, 5).is_ok());
            exact(bad)
        })),
        ("conv2d.oracle", Box::new(|c: &Ctx| {
            let mut r = c.rng("conv");
            let mut worst: f64 = 0.0;
            let cases = [(2, 8, 9, 9, 6, 3, 3, 1, 1, 1), (1, 3, 7, 8, 5, 3, 3, 2, 1, 1), (2, 4, 9, 6, 8, 1, 1, 1, 0, 0), (1, 8, 6, 9, 4, 5, 1, 1, 2, 0)];
            for (n, ci, h, w, co, kh, kw, s, ph, pw) in cases {
                let x = rand(&mut r, &[n, ci, h, w])?;
                let wt = rand(&mut r, &[co, ci, kh, kw])?;
                let b = rand(&mut r, &[co])?;
                let got = kernels::conv2d(&x, &wt, Some(&b), ConvGeom { stride: s, pad_h: ph, pad_w: pw, groups: 1 })?;
                worst = nan_max(worst, max_diff(&got, &oracle_conv(&x, &wt, Some(&b), s, ph, pw, 1))?);
            }
            at_most(worst, 1e-5)
        })),
        ("conv2d.depthwise_oracle", Box::new(|c: &Ctx| {
            let mut r = c.rng("dwconv");
            let x = rand(&mut r, &[1, 4, 5, 5])?;
            let wt = rand(&mut r, &[4, 1, 3, 3])?;
            let got = kernels::conv2d(&x, &wt, None, ConvGeom { stride: 1, pad_h: 1, pad_w: 1, groups: 4 })?;
            at_most(max_diff(&got, &oracle_conv(&x, &wt, None, 1, 1, 1, 4))?, 1e-5)
        })),
        ("conv2d.examples", Box::new(|_c: &Ctx| {
            let ones = Tensor::ones(&[1, 1, 3, 3])?;
            let y = kernels::conv2d(&ones, &ones, None, ConvGeom { stride: 1, pad_h: 1, pad_w: 1, groups: 1 })?;
            let want = Tensor::new(&[1, 1, 3, 3], vec![4., 6., 4., 6., 9., 6., 4., 6., 4.])?;
            exact(max_diff(&y, &want)?)
        })),
        ("linear.oracle", Box::new(|c: &Ctx| {
            let mut r = c.rng("linear");
            let x = rand(&mut r, &[2, 72])?;
            let w = rand(&mut r, &[9, 72])?;
            let b = rand(&mut r, &[9])?;
            at_most(max_diff(&kernels::linear(&x, &w, Some(&b))?, &oracle_linear(&x, &w, &b))?, 1e-6)
        })),
        ("global_avg_pool.oracle", Box::new(|c: &Ctx| {
            let x = rand(&mut c.rng("gap"), &[2, 8, 9, 9])?;
            at_most(max_diff(&kernels::global_avg_pool(&x)?, &oracle_gap(&x))?, 1e-6)
        })),
        ("cost_of.examples", Box::new(|_c: &Ctx| {
            let a = cost_of(ConvSpec::new(16, 32, 3), 1, 1).params;
            let b = cost_of(ConvSpec::new(64, 64, 1).without_bias(), 20, 20).flops;
            let d = cost_of(ConvSpec::depthwise(64, 3, 3), 1, 1).params;
            let l = cost_of(LinearSpec::new(4, 3), 1, 1).params;
            exact(count(a != 4640) + count(b != 3_276_800) + count(d != 576 + 64) + count(l != 15))
        })),
        ("cost_report.consistency", Box::new(|_c: &Ctx| {
            let mut bad = 0.0;
            for v in Variant::grid() {
                bad += count(!model::cost_report(&ModelConfig::new(v))?.is_consistent());
            }
            exact(bad)
        })),
    ]
}

fn dafm_setup(c: &Ctx, name: &str) -> Result<(Dafm, WeightStore, Tensor)> {
    let mut r = c.rng(name);
    let m = Dafm::new("dafm", DafmConfig::new(8).with_conv_groups(2))?;
    let s = init(&m, &mut r, Dafm::init)?;
    let x = rand(&mut r, &[2, 8, 6, 6])?;
    Ok((m, s, x))
}

fn dafm_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("dafm.shape", Box::new(|c: &Ctx| {
            let mut r = c.rng("dafm.shape");
            let mut bad = 0.0;
            for (ch, g, dims) in [(8, 4, [1, 8, 6, 6]), (8, 2, [2, 8, 3, 5]), (16, 4, [1, 16, 4, 4]), (12, 3, [1, 12, 1, 7])] {
                let m = Dafm::new("dafm", DafmConfig::new(ch).with_shuffle_groups(g).with_conv_groups(g))?;
                let s = init(&m, &mut r, Dafm::init)?;
                let x = rand(&mut r, &dims)?;
                let y = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
                bad += count(y[0].dims() != dims);
            }
            exact(bad)
        })),
        ("dafm.additivity", Box::new(|c: &Ctx| {
            let (m, s, x) = dafm_setup(c, "dafm.add")?;
            let out = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            let sep = eval(&s, &[&x], |t, p, v| Ok(vec![m.branch1(t, p, v[0])?, m.branch2(t, p, v[0])?.0]))?;
            let sum = kernels::zip_with(&sep[0], &sep[1], |a, b| a + b)?;
            exact(count(!out[0].bit_eq(&sum)))
        })),
        ("dafm.residual_identity", Box::new(|c: &Ctx| {
            let (m, mut s, x) = dafm_setup(c, "dafm.res")?;
            dafm::residual_only(&m, &mut s);
            let out = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            exact(max_diff(&out[0], &x)?)
        })),
        ("dafm.branch2_residual", Box::new(|c: &Ctx| {
            let (m, mut s, x) = dafm_setup(c, "dafm.b2res")?;
            s.zero_prefix("dafm.b2_out.");
            let out = eval(&s, &[&x], |t, p, v| Ok(vec![m.branch2(t, p, v[0])?.0]))?;
            exact(max_diff(&out[0], &x)?)
        })),
        ("dafm.shuffle_identity", Box::new(|c: &Ctx| {
            let (m, mut s, x) = dafm_setup(c, "dafm.cs")?;
            dafm::identity_branch1(&m, &mut s)?;
            let out = eval(&s, &[&x], |t, p, v| Ok(vec![m.branch1(t, p, v[0])?]))?;
            exact(max_diff(&out[0], &kernels::channel_shuffle(&x, m.cfg.shuffle_groups)?)?)
        })),
        ("dafm.zero_input", Box::new(|c: &Ctx| {
            let (m, mut s, _) = dafm_setup(c, "dafm.zero")?;
            for p in s.paths().filter(|p| p.ends_with(".bias")).map(String::from).collect::<Vec<_>>() {
                s.zero_prefix(&p);
            }
            let x = Tensor::zeros(&[1, 8, 4, 4])?;
            let out = eval(&s, &[&x], |t, p, v| Ok(vec![m.branch1(t, p, v[0])?]))?;
            exact(out[0].data().iter().map(|v| v.abs() as f64).fold(0.0, nan_max))
        })),
        ("dafm.attention_rows", Box::new(|c: &Ctx| {
            let (m, s, x) = dafm_setup(c, "dafm.rows")?;
            let map = eval(&s, &[&x], |t, p, v| Ok(vec![m.branch2(t, p, v[0])?.1]))?;
            at_most(row_sum_error(&map[0]), 1e-6)
        })),
        ("dafm.attention_uniform", Box::new(|c: &Ctx| {
            let mut r = c.rng("dafm.uniform");
            let q = rand(&mut r, &[1, 4, 3, 3])?;
            let v = rand(&mut r, &[1, 4, 3, 3])?;
            let k0 = Tensor::zeros(&[1, 4, 3, 3])?;
            let empty = WeightStore::new();
            let mut worst: f64 = 0.0;
            for (k, a) in [(&k0, 1.0f32), (&q, 1e9)] {
                let a = Tensor::new(&[1], vec![a])?;
                let out = eval(&empty, &[&q, k, &v, &a], |t, _, xs| Ok(vec![dafm::attention(t, xs[0], xs[1], xs[2], xs[3])?.0]))?;
                for p in 0..9 {
                    let mean = (0..4).map(|c| v.data()[c * 9 + p] as f64).sum::<f64>() / 4.0;
                    for c in 0..4 {
                        worst = nan_max(worst, (out[0].data()[c * 9 + p] as f64 - mean).abs());
                    }
                }
            }
            at_most(worst, 1e-5)
        })),
        ("dafm.attention_cost_scaling", Box::new(|_c: &Ctx| {
            let base = dafm::attention_cost(64, 100).flops as f64;
            let wider = dafm::attention_cost(128, 100).flops as f64;
            let larger = dafm::attention_cost(64, 400).flops as f64;
            // Quadratic in C, linear in HW.
            exact((larger / base - 4.0).abs() + (wider / base - 4.0).abs())
        })),
    ]
}

fn oahead_setup(c: &Ctx, name: &str) -> Result<(Oahead, WeightStore, Tensor)> {
    let mut r = c.rng(name);
    let m = Oahead::new("oahead", OaheadConfig::new(8))?;
    let s = init(&m, &mut r, Oahead::init)?;
    let x = rand(&mut r, &[2, 8, 5, 5])?;
    Ok((m, s, x))
}

fn oahead_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("oahead.shape", Box::new(|c: &Ctx| {
            let mut r = c.rng("oahead.shape");
            let mut bad = 0.0;
            for (ch, ks, dims) in [(8, vec![3, 5], [1, 8, 6, 6]), (4, vec![3], [2, 4, 3, 5]), (8, vec![1, 3, 7], [1, 8, 4, 4])] {
                let m = Oahead::new("oahead", OaheadConfig { channels: ch, dw_kernels: ks, fc_reduction: 4 })?;
                let s = init(&m, &mut r, Oahead::init)?;
                let x = rand(&mut r, &dims)?;
                bad += count(eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?[0].dims() != dims);
            }
            exact(bad)
        })),
        ("oahead.gate_range", Box::new(|c: &Ctx| {
            let (m, s, x) = oahead_setup(c, "oahead.range")?;
            let g = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward_parts(t, p, v[0])?.gate]))?;
            exact(g[0].data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count() as f64)
        })),
        ("oahead.gate_spatially_constant", Box::new(|c: &Ctx| {
            let (m, s, x) = oahead_setup(c, "oahead.const")?;
            let o = eval(&s, &[&x], |t, p, v| {
                let parts = m.forward_parts(t, p, v[0])?;
                Ok(vec![parts.gate, parts.out])
            })?;
            let (gate, out) = (&o[0], &o[1]);
            let hw = 25;
            let mut worst: f64 = 0.0;
            for (i, (&xv, &ov)) in x.data().iter().zip(out.data()).enumerate() {
                worst = nan_max(worst, (ov - xv * gate.data()[i / hw]).abs() as f64);
            }
            exact(worst)
        })),
        ("oahead.damping", Box::new(|c: &Ctx| {
            let (m, s, x) = oahead_setup(c, "oahead.damp")?;
            let o = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            exact(o[0].data().iter().zip(x.data()).filter(|(o, x)| o.abs() > x.abs()).count() as f64)
        })),
        ("oahead.zero_logits_halve", Box::new(|c: &Ctx| {
            let (m, mut s, x) = oahead_setup(c, "oahead.half")?;
            s.zero_prefix("oahead.fc2.");
            let o = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            exact(max_diff(&o[0], &x.map(|v| 0.5 * v))?)
        })),
        ("oahead.saturated_gate", Box::new(|c: &Ctx| {
            let (m, mut s, x) = oahead_setup(c, "oahead.sat")?;
            s.zero_prefix("oahead.fc2.weight");
            s.set("oahead.fc2.bias", Tensor::full(&[8], 20.0)?)?;
            let o = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            at_most(max_diff(&o[0], &x)?, 1e-6)
        })),
        ("oahead.head_gate_halves", Box::new(|c: &Ctx| {
            let mut r = c.rng("oahead.head");
            let oa = OaheadConfig::new(0);
            let h = HeadBranch::new("head.0.cls", 8, 16, 6, Some(&oa))?;
            let mut s = init(&h, &mut r, HeadBranch::init)?;
            s.zero_prefix("head.0.cls.oahead.fc2.");
            let x = rand(&mut r, &[1, 8, 4, 4])?;
            let o = eval(&s, &[&x], |t, p, v| {
                let tr = h.trace(t, p, v[0])?;
                Ok(vec![tr.conv1, tr.pre_pred, tr.out])
            })?;
            let shapes = count(o[2].dims() != [1, 6, 4, 4]);
            exact(max_diff(&o[1], &o[0].map(|v| 0.5 * v))? + shapes)
        })),
    ]
}

fn dsconv_setup(c: &Ctx, name: &str) -> Result<(Dsconv, WeightStore, Tensor)> {
    let mut r = c.rng(name);
    let m = Dsconv::new("ds", DsconvConfig::new(8))?;
    let s = init(&m, &mut r, Dsconv::init)?;
    let x = rand(&mut r, &[2, 8, 6, 6])?;
    Ok((m, s, x))
}

fn alpha_of(m: &Dsconv, s: &WeightStore, x: &Tensor) -> Result<Tensor> {
    Ok(eval(s, &[x], |t, p, v| Ok(vec![m.weights(t, p, v[0])?]))?.remove(0))
}

fn dsconv_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("dsconv.alpha_simplex", Box::new(|c: &Ctx| {
            let (m, s, x) = dsconv_setup(c, "ds.simplex")?;
            let a = alpha_of(&m, &s, &x.map(|v| 50.0 * v))?;
            let nonpos = a.data().iter().filter(|&&v| !(v > 0.0)).count() as f64;
            at_most(row_sum_error(&a) + nonpos, 1e-6)
        })),
        ("dsconv.alpha_examples", Box::new(|c: &Ctx| {
            let (m, mut s, x) = dsconv_setup(c, "ds.examples")?;
            s.zero_prefix("ds.fc_score.");
            let uniform = alpha_of(&m, &s, &x)?;
            s.set("ds.fc_score.bias", Tensor::new(&[3], vec![2f32.ln(), 0.0, 0.0])?)?;
            let biased = alpha_of(&m, &s, &x)?;
            let e = nan_max(
                max_diff(&uniform, &Tensor::full(&[2, 3], 1.0 / 3.0)?)?,
                max_diff(&biased, &Tensor::new(&[2, 3], vec![0.5, 0.25, 0.25, 0.5, 0.25, 0.25])?)?,
            );
            at_most(e, 1e-6)
        })),
        ("dsconv.alpha_spatial_permutation", Box::new(|c: &Ctx| {
            let (m, s, x) = dsconv_setup(c, "ds.perm")?;
            let mut flipped = x.clone();
            for plane in flipped.data_mut().chunks_mut(36) {
                plane.reverse();
            }
            at_most(max_diff(&alpha_of(&m, &s, &x)?, &alpha_of(&m, &s, &flipped)?)?, 1e-6)
        })),
        ("dsconv.convexity", Box::new(|c: &Ctx| {
            let (m, mut s, x) = dsconv_setup(c, "ds.convex")?;
            for b in m.branches() {
                for conv in b.convs() {
                    s.set(&conv.weight_path(), nn::identity_weight(&conv.spec)?)?;
                    s.zero_prefix(&conv.bias_path());
                }
            }
            let x = x.map(|v| 3.0 * v);
            let o = eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?;
            at_most(max_diff(&o[0], &x)?, 1e-6)
        })),
        ("dsconv.saturated_square", Box::new(|c: &Ctx| {
            let (m, mut s, x) = dsconv_setup(c, "ds.sat")?;
            s.zero_prefix("ds.fc_score.weight");
            s.set("ds.fc_score.bias", Tensor::new(&[3], vec![20.0, -20.0, -20.0])?)?;
            let o = eval(&s, &[&x], |t, p, v| {
                let parts = m.forward_parts(t, p, v[0])?;
                Ok(vec![parts.out, parts.branches[0]])
            })?;
            at_most(max_diff(&o[0], &o[1])?, 1e-5)
        })),
        ("dsconv.shape", Box::new(|c: &Ctx| {
            let mut r = c.rng("ds.shape");
            let mut bad = 0.0;
            for k in [1, 3, 5] {
                for mm in [1, 3, 5, 7] {
                    let m = Dsconv::new("ds", DsconvConfig { channels: 4, square_k: k, strip_m: mm })?;
                    let s = init(&m, &mut r, Dsconv::init)?;
                    let x = rand(&mut r, &[1, 4, 5, 6])?;
                    bad += count(eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?[0].dims() != [1, 4, 5, 6]);
                }
            }
            bad += count(Dsconv::new("ds", DsconvConfig { channels: 4, square_k: 4, strip_m: 5 }).is_ok());
            exact(bad)
        })),
        ("c2f_dsconv.empty_chain_identity", Box::new(|c: &Ctx| {
            let mut r = c.rng("c2f.id");
            let mut cfg = C2fConfig::new(8, 8, 0, UnitKind::dsconv());
            cfg.activation = Activation::None;
            let m = C2f::new("c2f_dsconv", cfg)?;
            let mut s = init(&m, &mut r, C2f::init)?;
            for conv in [&m.cv1, &m.cv2] {
                s.set(&conv.weight_path(), nn::identity_weight(&conv.spec)?)?;
                s.zero_prefix(&conv.bias_path());
            }
            let x = rand(&mut r, &[2, 8, 4, 4])?;
            exact(max_diff(&eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?[0], &x)?)
        })),
        ("c2f_dsconv.shape", Box::new(|c: &Ctx| {
            let mut r = c.rng("c2f.shape");
            let mut bad = 0.0;
            for n in 0..4 {
                let m = C2f::new("c2f_dsconv", C2fConfig::new(6, 10, n, UnitKind::dsconv()))?;
                let s = init(&m, &mut r, C2f::init)?;
                let x = rand(&mut r, &[1, 6, 5, 4])?;
                bad += count(eval(&s, &[&x], |t, p, v| Ok(vec![m.forward(t, p, v[0])?]))?[0].dims() != [1, 10, 5, 4]);
            }
            bad += count(C2f::new("c2f_dsconv", C2fConfig::new(6, 9, 1, UnitKind::dsconv())).is_ok());
            exact(bad)
        })),
        ("c2f_dsconv.fewer_params_than_c2f", Box::new(|_c: &Ctx| {
            let params = |unit| -> Result<u64> {
                let mut rep = crate::cost::CostReport::new();
                C2f::new("b", C2fConfig::new(64, 64, 2, unit))?.cost(20, 20, &mut rep)?;
                Ok(rep.total_params())
            };
            below(params(UnitKind::dsconv())? as f64 / params(UnitKind::Bottleneck)? as f64, 1.0)
        })),
    ]
}

fn toy(variant: Variant, rng: &mut Rng) -> Result<(Model, WeightStore)> {
    Model::build(ModelConfig::toy(variant), rng)
}

fn forward_all(m: &Model, s: &WeightStore, x: &Tensor) -> Result<Vec<Tensor>> {
    eval(s, &[x], |t, p, v| Ok(m.forward(t, p, v[0])?.into_iter().flat_map(|o| [o.cls, o.reg]).collect()))
}

fn model_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("model.scale_contract", Box::new(|c: &Ctx| {
            let mut r = c.rng("model.scales");
            let (m, s) = toy(Variant::DAONET, &mut r)?;
            let mut bad = 0.0;
            for size in [64, 96, 128] {
                let outs = forward_all(&m, &s, &Tensor::zeros(&[1, 3, size, size])?)?;
                for (i, stride) in model::STRIDES.iter().enumerate() {
                    let hw = size / stride;
                    bad += count(outs[2 * i].dims() != [1, 6, hw, hw]);
                    bad += count(outs[2 * i + 1].dims() != [1, 64, hw, hw]);
                }
            }
            bad += count(forward_all(&m, &s, &Tensor::zeros(&[1, 3, 48, 48])?).is_ok());
            exact(bad)
        })),
        ("model.finite_on_zero_input", Box::new(|c: &Ctx| {
            let (m, mut s) = toy(Variant::DAONET, &mut c.rng("model.finite"))?;
            for p in s.paths().filter(|p| p.ends_with(".bias")).map(String::from).collect::<Vec<_>>() {
                s.zero_prefix(&p);
            }
            let outs = forward_all(&m, &s, &Tensor::zeros(&[1, 3, 64, 64])?)?;
            exact(outs.iter().filter(|t| !t.is_finite()).count() as f64)
        })),
        ("model.manifest_flags", Box::new(|c: &Ctx| {
            let mut r = c.rng("model.flags");
            let (_, base) = toy(Variant::BASELINE, &mut r)?;
            let (_, dao) = toy(Variant::DAONET, &mut r)?;
            let has = |s: &WeightStore, f: &dyn Fn(&str) -> bool| s.paths().any(f);
            let dafm_p = |p: &str| p.starts_with("dafm.");
            let oa_p = |p: &str| p.starts_with("head.") && p.contains(".oahead.");
            let ds_p = |p: &str| p.starts_with("backbone.") && p.contains(".c2f_dsconv.");
            let mut bad = 0.0;
            for f in [&dafm_p as &dyn Fn(&str) -> bool, &oa_p, &ds_p] {
                bad += count(has(&base, f)) + count(!has(&dao, f));
            }
            bad += count(has(&base, &|p: &str| p.contains("dsconv") || p.contains("oahead")));
            exact(bad)
        })),
        ("model.manifest_complete", Box::new(|c: &Ctx| {
            let mut r = c.rng("model.complete");
            let (m, s) = toy(Variant::DAONET, &mut r)?;
            let x = rand(&mut r, &[1, 3, 64, 64])?;
            let mut t = Tape::new();
            let p = t.bind(&s);
            let xv = t.leaf(x);
            let mut acc: Option<Var> = None;
            for o in m.forward(&mut t, &p, xv)? {
                for v in [o.cls, o.reg] {
                    let sv = t.sum(v);
                    acc = Some(match acc {
                        Some(a) => t.add(a, sv)?,
                        None => sv,
                    });
                }
            }
            let g = t.backward(acc.expect("outputs"))?;
            exact(p.iter().filter(|(_, v)| g.get(*v).is_none()).count() as f64)
        })),
        ("model.store_roundtrip", Box::new(|c: &Ctx| {
            let (_, s) = toy(Variant::DAONET, &mut c.rng("model.roundtrip"))?;
            let bytes = s.to_bytes();
            let back = WeightStore::from_bytes(&bytes)?;
            exact(count(back.to_bytes() != bytes) + count(!back.bit_eq(&s)))
        })),
        ("model.build_determinism", Box::new(|c: &Ctx| {
            let (_, a) = toy(Variant::DAONET, &mut Rng::new(c.seed))?;
            let (_, b) = toy(Variant::DAONET, &mut Rng::new(c.seed))?;
            let (_, d) = toy(Variant::DAONET, &mut Rng::new(c.seed.wrapping_add(1)))?;
            exact(count(!a.bit_eq(&b)) + count(a.bit_eq(&d)))
        })),
        ("model.tape_cost_agreement", Box::new(|c: &Ctx| {
            let (m, s) = toy(Variant::DAONET, &mut c.rng("model.cost"))?;
            let rep = m.cost_report()?;
            let mut t = Tape::<f32>::new();
            let p = t.bind(&s);
            let xv = t.leaf(Tensor::zeros(&[1, 3, 64, 64])?);
            m.forward(&mut t, &p, xv)?;
            exact((t.flops() as f64 - rep.total_flops() as f64).abs() + (s.param_count() as f64 - rep.total_params() as f64).abs())
        })),
        ("determinism.thread_count", Box::new(|c: &Ctx| {
            let mut r = c.rng("threads");
            let (m, s) = toy(Variant::DAONET, &mut r)?;
            let x = rand(&mut r, &[2, 3, 64, 64])?;
            let run = |n: usize| -> Result<Vec<Tensor>> {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| crate::Error::Config(e.to_string()))?;
                pool.install(|| forward_all(&m, &s, &x))
            };
            let one = run(1)?;
            let four = run(4)?;
            exact(one.iter().zip(&four).filter(|(a, b)| !a.bit_eq(b)).count() as f64)
        })),
    ]
}

pub const BASELINE_PARAMS_M: f64 = 3.0;
pub const BASELINE_GFLOPS: f64 = 8.1;
pub const DAONET_PARAMS_M: f64 = 2.5;
pub const DAONET_GFLOPS: f64 = 5.5;
pub const PARAMS_TOL: f64 = 0.10;
pub const FLOPS_TOL: f64 = 0.15;
pub const DAONET_TOL: f64 = 0.15;

fn report(v: Variant) -> Result<crate::cost::CostReport> {
    model::cost_report(&ModelConfig::new(v))
}

fn variant(s: &str) -> Variant {
    s.parse().expect("static variant name")
}

/// Cost-accounting checks at 640×640.
fn cost_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("cost.baseline_params", Box::new(|_c: &Ctx| at_most((report(Variant::BASELINE)?.params_m() / BASELINE_PARAMS_M - 1.0).abs(), PARAMS_TOL))),
        ("cost.baseline_gflops", Box::new(|_c: &Ctx| at_most((report(Variant::BASELINE)?.gflops() / BASELINE_GFLOPS - 1.0).abs(), FLOPS_TOL))),
        ("cost.daonet_params_target", Box::new(|_c: &Ctx| at_most((report(Variant::DAONET)?.params_m() / DAONET_PARAMS_M - 1.0).abs(), DAONET_TOL))),
        ("cost.daonet_gflops_target", Box::new(|_c: &Ctx| at_most((report(Variant::DAONET)?.gflops() / DAONET_GFLOPS - 1.0).abs(), DAONET_TOL))),
        ("cost.daonet_params_below_baseline", Box::new(|_c: &Ctx| {
            below(report(Variant::DAONET)?.total_params() as f64 / report(Variant::BASELINE)?.total_params() as f64, 1.0)
        })),
        ("cost.daonet_flops_below_baseline", Box::new(|_c: &Ctx| {
            below(report(Variant::DAONET)?.total_flops() as f64 / report(Variant::BASELINE)?.total_flops() as f64, 1.0)
        })),
        ("cost.dafm_only_params_above_baseline", Box::new(|_c: &Ctx| {
            below(report(Variant::BASELINE)?.total_params() as f64 / report(variant("dafm"))?.total_params() as f64, 1.0)
        })),
        ("cost.dsconv_only_params_below_baseline", Box::new(|_c: &Ctx| {
            below(report(variant("dsconv"))?.total_params() as f64 / report(Variant::BASELINE)?.total_params() as f64, 1.0)
        })),
        ("cost.oahead_only_flops_below_baseline", Box::new(|_c: &Ctx| {
            below(report(variant("oahead"))?.total_flops() as f64 / report(Variant::BASELINE)?.total_flops() as f64, 1.0)
        })),
        ("cost.dsconv_reduces_backbone_params", Box::new(|_c: &Ctx| {
            let grid = model::ablation_grid(&ModelConfig::baseline())?;
            let mut worst: f64 = 0.0;
            for on in grid.iter().filter(|r| r.variant.dsconv) {
                let off = grid
                    .iter()
                    .find(|r| !r.variant.dsconv && r.variant.dafm == on.variant.dafm && r.variant.oahead == on.variant.oahead)
                    .expect("grid is complete");
                worst = nan_max(worst, on.report.subtotal("backbone.").params as f64 / off.report.subtotal("backbone.").params as f64);
            }
            below(worst, 1.0)
        })),
        ("cost.dafm_adds_params", Box::new(|_c: &Ctx| {
            let grid = model::ablation_grid(&ModelConfig::baseline())?;
            let mut bad = 0.0;
            for on in grid.iter().filter(|r| r.variant.dafm) {
                let off = grid.iter().find(|r| r.variant == Variant { dafm: false, ..on.variant }).expect("grid is complete");
                bad += count(on.report.total_params() <= off.report.total_params());
            }
            exact(bad)
        })),
        ("cost.ablation_row_order", Box::new(|_c: &Ctx| {
            let want = ["baseline", "dafm", "oahead", "dsconv", "dafm+oahead", "dafm+dsconv", "oahead+dsconv", "daonet"];
            let grid = model::ablation_grid(&ModelConfig::baseline())?;
            exact(grid.iter().zip(want).filter(|(r, w)| r.variant.to_string() != *w).count() as f64 + count(grid.len() != 8))
        })),
        ("cost.quadratic_in_image_size", Box::new(|_c: &Ctx| {
            let m = Model::new(ModelConfig::baseline())?;
            exact((m.cost_at(640)?.total_flops() as f64 - 4.0 * m.cost_at(320)?.total_flops() as f64).abs())
        })),
    ]
}

fn gradcheck_checks() -> Vec<(String, CheckFn)> {
    let mut v: Vec<(String, CheckFn)> = Vec::new();
    let names = gradcheck::primitive_problems(0).map(|ps| ps.into_iter().map(|p| p.name).collect::<Vec<_>>()).unwrap_or_default();
    for (i, name) in names.into_iter().enumerate() {
        v.push((
            format!("gradcheck.{name}"),
            Box::new(move |c: &Ctx| {
                let p = gradcheck::primitive_problems(c.seed)?.into_iter().nth(i).expect("stable problem list");
                below(gradcheck::run(p, c.seed)?.worst(), 1.0)
            }),
        ));
    }
    for t in [Target::Dafm, Target::Oahead, Target::Dsconv, Target::C2fDsconv] {
        v.push((format!("gradcheck.{t}"), Box::new(move |c: &Ctx| below(gradcheck::check(t, c.seed)?.worst(), 1.0))));
    }
    v
}

/// Every check, in report order.
fn all_checks() -> Vec<(String, CheckFn)> {
    let mut v: Vec<(String, CheckFn)> = Vec::new();
    for group in [tensor_core_checks(), nn_checks(), dafm_checks(), oahead_checks(), dsconv_checks(), model_checks(), cost_checks()] {
        v.extend(group.into_iter().map(|(n, f)| (n.to_string(), f)));
    }
    v.extend(gradcheck_checks());
    v
}

pub fn check_names() -> Vec<String> {
    all_checks().into_iter().map(|(n, _)| n).collect()
}

/// Runs the whole suite with inputs drawn from `seed`.
pub fn run_suite(seed: u64, opts: SuiteOptions) -> Vec<CheckResult> {
    let ctx = Ctx { seed, fault: opts.fault };
    all_checks()
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = f(&ctx);
            let elapsed_ms = opts.timings.then(|| start.elapsed().as_millis() as u64);
            match outcome {
                Ok(o) => CheckResult {
                    pass: o.bound.holds(o.measured, o.threshold),
                    name,
                    measured: o.measured,
                    threshold: o.threshold,
                    bound: o.bound,
                    elapsed_ms,
                    error: None,
                },
                Err(e) => CheckResult {
                    name,
                    pass: false,
                    measured: f64::NAN,
                    threshold: 0.0,
                    bound: Bound::AtMost,
                    elapsed_ms,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}
