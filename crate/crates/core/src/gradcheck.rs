//! Central-difference gradient checks in 64-bit arithmetic.
//!
//! Every tensor (module weights plus the input) is a parameter group. For a
//! chosen coordinate `θ` the numeric derivative is `(L(θ+h) − L(θ−h)) / 2h`
//! with `h = 1e-3`. A coordinate passes when the relative error
//! `|a − n| / |a|` is below `1e-4` where `|a| > 1e-6`, otherwise when the
//! absolute error is below `1e-6`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::blocks::{C2f, C2fConfig, UnitKind};
use crate::dafm::{Dafm, DafmConfig};
use crate::dsconv::{Dsconv, DsconvConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::oahead::{Oahead, OaheadConfig};
use crate::rng::{rand_uniform, Rng};
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
/// Below this analytic magnitude the absolute criterion applies.
pub const REL_FLOOR: f64 = 1e-6;

pub const INPUT: &str = "input";

/// Builds the scalar loss from parameter leaves (the input is under [`INPUT`]).
pub type LossFn = Box<dyn Fn(&mut Tape<f64>, &Params) -> Result<Var> + Send + Sync>;

pub struct Problem {
    pub name: String,
    pub groups: Vec<(String, Tensor<f64>)>,
    pub loss: LossFn,
    /// Coordinates per group; `None` checks every coordinate.
    pub samples: Option<usize>,
    /// Groups whose analytic gradient must not vanish.
    pub nonzero: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Largest analytic magnitude seen in the group.
    pub max_grad: f64,
    /// Worst coordinate error as a fraction of its tolerance; passing means `< 1`.
    pub worst: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub module: String,
    pub groups: Vec<GroupResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Records the loss with group `swap.0` replaced by `swap.1`, if given.
fn evaluate(groups: &[(String, Tensor<f64>)], swap: Option<(usize, &Tensor<f64>)>, loss: &LossFn) -> Result<(Tape<f64>, Params, Var)> {
    let mut tape = Tape::new();
    let mut params = Params::default();
    for (gi, (path, t)) in groups.iter().enumerate() {
        let t = match swap {
            Some((i, s)) if i == gi => s,
            _ => t,
        };
        let v = tape.leaf(t.clone());
        params.insert(path.clone(), v);
    }
    let l = loss(&mut tape, &params)?;
    Ok((tape, params, l))
}

fn perturbed(groups: &[(String, Tensor<f64>)], gi: usize, i: usize, delta: f64, loss: &LossFn) -> Result<(f64, u64)> {
    let mut t = groups[gi].1.clone();
    t.data_mut()[i] += delta;
    let (tape, _, l) = evaluate(groups, Some((gi, &t)), loss)?;
    Ok((tape.value(l).data()[0], tape.branch_signature()))
}

/// Central difference at `STEP`. When the two probes land on different sides
/// of a max-pool tie or an `abs` kink the quotient says nothing about the
/// derivative, so the step shrinks until both probes share the base point's
/// piece.
/// Returns the quotient and the step it used.
fn central_difference(groups: &[(String, Tensor<f64>)], gi: usize, i: usize, base: u64, start: f64, loss: &LossFn) -> Result<(f64, f64)> {
    let mut h = start;
    loop {
        let (up, su) = perturbed(groups, gi, i, h, loss)?;
        let (down, sd) = perturbed(groups, gi, i, -h, loss)?;
        if (su == base && sd == base) || h < STEP * 1e-4 {
            return Ok(((up - down) / (2.0 * h), h));
        }
        h /= 4.0;
    }
}

/// Error of `numeric` against `a` as a fraction of the tolerance, with the
/// absolute and (when defined) relative error.
fn score(a: f64, numeric: f64) -> (f64, f64, Option<f64>) {
    let abs = (a - numeric).abs();
    if a.abs() > REL_FLOOR {
        let rel = abs / a.abs();
        (rel / REL_TOL, abs, Some(rel))
    } else {
        (abs / ABS_TOL, abs, None)
    }
}

/// The numeric estimate a coordinate is judged against. A plain central
/// difference is tried first; if it misses, its O(h^2) truncation term is
/// cancelled by Richardson extrapolation with half the step, which a wrong
/// adjoint fails just the same.
fn numeric_estimate(groups: &[(String, Tensor<f64>)], gi: usize, i: usize, base: u64, a: f64, loss: &LossFn) -> Result<f64> {
    let (d1, h) = central_difference(groups, gi, i, base, STEP, loss)?;
    if score(a, d1).0 < 1.0 {
        return Ok(d1);
    }
    let (d2, h2) = central_difference(groups, gi, i, base, h / 2.0, loss)?;
    let refined = if h2 == h / 2.0 { (4.0 * d2 - d1) / 3.0 } else { d2 };
    Ok(if score(a, refined).0 < score(a, d1).0 { refined } else { d1 })
}

/// Distinct coordinates drawn without replacement, in ascending order.
fn sample_indices(rng: &mut Rng, len: usize, k: usize) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = i + rng.below(len - i);
        all.swap(i, j);
    }
    let mut picked = all[..k].to_vec();
    picked.sort_unstable();
    picked
}

pub fn run(problem: Problem, seed: u64) -> Result<Report> {
    let Problem { name, groups, loss, samples, nonzero } = problem;
    let (tape, params, l) = evaluate(&groups, None, &loss)?;
    let grads = tape.backward(l)?;
    let base = tape.branch_signature();
    let mut rng = Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut results = Vec::with_capacity(groups.len());
    for gi in 0..groups.len() {
        let path = groups[gi].0.clone();
        let var = params.get(&path)?;
        let analytic = grads.get(var).cloned().unwrap_or_else(|| groups[gi].1.map(|_| 0.0));
        let n = groups[gi].1.len();
        let idx = match samples {
            Some(k) => sample_indices(&mut rng, n, k),
            None => (0..n).collect(),
        };
        let mut res = GroupResult { group: path.clone(), checked: idx.len(), max_rel: 0.0, max_abs: 0.0, max_grad: 0.0, worst: 0.0, pass: true };
        let numerics: Vec<f64> = idx
            .par_iter()
            .map(|&i| numeric_estimate(&groups, gi, i, base, analytic.data()[i], &loss))
            .collect::<Result<_>>()?;
        for (&i, &numeric) in idx.iter().zip(&numerics) {
            let a = analytic.data()[i];
            let (score, abs, rel) = score(a, numeric);
            res.max_abs = res.max_abs.max(abs);
            res.max_grad = res.max_grad.max(a.abs());
            if let Some(rel) = rel {
                res.max_rel = res.max_rel.max(rel);
            }
            res.worst = if score.is_nan() { f64::INFINITY } else { res.worst.max(score) };
        }
        if nonzero.contains(&path) && res.max_grad <= REL_FLOOR {
            res.worst = f64::INFINITY;
        }
        res.pass = res.worst < 1.0;
        results.push(res);
    }
    Ok(Report { module: name, groups: results })
}

/// Targets understood by [`problem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Dafm,
    Oahead,
    Dsconv,
    C2fDsconv,
    ModelToy,
}

impl Target {
    pub const ALL: [Target; 5] = [Target::Dafm, Target::Oahead, Target::Dsconv, Target::C2fDsconv, Target::ModelToy];

    pub fn name(self) -> &'static str {
        match self {
            Target::Dafm => "dafm",
            Target::Oahead => "oahead",
            Target::Dsconv => "dsconv",
            Target::C2fDsconv => "c2f_dsconv",
            Target::ModelToy => "model-toy",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown gradcheck module {s:?}; expected one of dafm, oahead, dsconv, c2f_dsconv, model-toy")))
    }
}

fn groups_of(store: &WeightStore, input: Tensor) -> Vec<(String, Tensor<f64>)> {
    let mut g: Vec<_> = store.iter().map(|(p, t)| (p.to_string(), t.cast())).collect();
    g.push((INPUT.to_string(), input.cast()));
    g
}

const PROJECTION_SEED: u64 = 0x5eed;

/// `Σ out ⊙ r` with `r` drawn from a fixed stream, so no output direction is privileged.
fn projected<F>(forward: F) -> LossFn
where
    F: Fn(&mut Tape<f64>, &Params) -> Result<Var> + Send + Sync + 'static,
{
    Box::new(move |tape, p| {
        let out = forward(tape, p)?;
        let r = rand_uniform(&mut Rng::new(PROJECTION_SEED), tape.dims(out), -1.0, 1.0)?;
        let rv = tape.leaf(r.cast());
        let prod = tape.mul(out, rv)?;
        Ok(tape.sum(prod))
    })
}

fn module_loss<F>(forward: F) -> LossFn
where
    F: Fn(&mut Tape<f64>, &Params, Var) -> Result<Var> + Send + Sync + 'static,
{
    projected(move |t, p| {
        let x = p.get(INPUT)?;
        forward(t, p, x)
    })
}

const MODULE_DIMS: [usize; 4] = [1, 8, 6, 6];

/// The check problem for `target`, with weights and input drawn from `seed`.
pub fn problem(target: Target, seed: u64) -> Result<Problem> {
    let mut rng = Rng::new(seed);
    let mut store = WeightStore::new();
    let name = target.name().to_string();
    let module_input = |rng: &mut Rng| rand_uniform(rng, &MODULE_DIMS, -1.0, 1.0);
    Ok(match target {
        Target::Dafm => {
            let m = Dafm::new("dafm", DafmConfig::new(8).with_shuffle_groups(2).with_conv_groups(2))?;
            m.init(&mut store, &mut rng)?;
            let x = module_input(&mut rng)?;
            Problem {
                name,
                groups: groups_of(&store, x),
                loss: module_loss(move |t, p, x| m.forward(t, p, x)),
                samples: None,
                nonzero: vec!["dafm.a".into()],
            }
        }
        Target::Oahead => {
            let m = Oahead::new("oahead", OaheadConfig::new(8))?;
            m.init(&mut store, &mut rng)?;
            let x = module_input(&mut rng)?;
            Problem {
                name,
                groups: groups_of(&store, x),
                loss: module_loss(move |t, p, x| m.forward(t, p, x)),
                samples: None,
                nonzero: vec!["oahead.fc2.weight".into(), "oahead.fc1.weight".into()],
            }
        }
        Target::Dsconv => {
            let m = Dsconv::new("dsconv", DsconvConfig::new(8))?;
            m.init(&mut store, &mut rng)?;
            let x = module_input(&mut rng)?;
            Problem {
                name,
                groups: groups_of(&store, x),
                loss: module_loss(move |t, p, x| m.forward(t, p, x)),
                samples: None,
                nonzero: vec!["dsconv.fc_score.weight".into()],
            }
        }
        Target::C2fDsconv => {
            let m = C2f::new("c2f_dsconv", C2fConfig::new(8, 8, 2, UnitKind::dsconv()))?;
            m.init(&mut store, &mut rng)?;
            let x = module_input(&mut rng)?;
            Problem {
                name,
                groups: groups_of(&store, x),
                loss: module_loss(move |t, p, x| m.forward(t, p, x)),
                samples: None,
                nonzero: vec!["c2f_dsconv.m.0.fc_score.weight".into(), "c2f_dsconv.m.1.fc_score.weight".into()],
            }
        }
        Target::ModelToy => {
            let cfg = ModelConfig::toy(Variant::DAONET);
            let s = cfg.input_size;
            let (m, store) = Model::build(cfg, &mut rng)?;
            let x = rand_uniform(&mut rng, &[1, 3, s, s], -1.0, 1.0)?;
            // Plain sum of every head output.
            let loss: LossFn = Box::new(move |tape, p| {
                let x = p.get(INPUT)?;
                let outs = m.forward(tape, p, x)?;
                let mut acc: Option<Var> = None;
                for o in outs {
                    for v in [o.cls, o.reg] {
                        let s = tape.sum(v);
                        acc = Some(match acc {
                            Some(a) => tape.add(a, s)?,
                            None => s,
                        });
                    }
                }
                Ok(acc.expect("three scales"))
            });
            Problem { name, groups: groups_of(&store, x), loss, samples: Some(3), nonzero: vec![] }
        }
    })
}

fn rand64(rng: &mut Rng, dims: &[usize]) -> Result<Tensor<f64>> {
    Ok(rand_uniform(rng, dims, -1.0, 1.0)?.cast())
}

/// Values spaced 0.01 apart in shuffled order, so no max-pool window holds
/// two entries within the finite-difference step.
fn separated(rng: &mut Rng, dims: &[usize]) -> Result<Tensor<f64>> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.below(i + 1));
    }
    Tensor::new(dims, v)
}

/// Values with magnitude in `[0.1, 1)`, away from the kink of `abs`.
fn away_from_zero(rng: &mut Rng, dims: &[usize]) -> Result<Tensor<f64>> {
    Ok(rand64(rng, dims)?.map(|v| if v < 0.0 { v * 0.9 - 0.1 } else { v * 0.9 + 0.1 }))
}

fn primitive<F>(name: &str, groups: Vec<(&str, Tensor<f64>)>, f: F) -> Problem
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    let names: Vec<String> = groups.iter().map(|(n, _)| n.to_string()).collect();
    Problem {
        name: name.to_string(),
        groups: groups.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        loss: projected(move |t, p| {
            let vars = names.iter().map(|n| p.get(n)).collect::<Result<Vec<_>>>()?;
            f(t, &vars)
        }),
        samples: None,
        nonzero: vec![],
    }
}

/// One problem per primitive op, on inputs no larger than `[2, 8, 6, 6]`.
pub fn primitive_problems(seed: u64) -> Result<Vec<Problem>> {
    use crate::kernels::ConvGeom;
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let geom = |stride, pad_h, pad_w, groups| ConvGeom { stride, pad_h, pad_w, groups };
    let g1 = geom(1, 1, 1, 1);
    let g2 = geom(2, 1, 1, 2);
    let gs = geom(1, 2, 0, 4);
    Ok(vec![
        primitive("conv2d", vec![("x", rand64(r, &[2, 4, 5, 5])?), ("w", rand64(r, &[6, 4, 3, 3])?), ("b", rand64(r, &[6])?)], move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), g1)
        }),
        primitive("conv2d.grouped_strided", vec![("x", rand64(r, &[1, 4, 6, 6])?), ("w", rand64(r, &[4, 2, 3, 3])?)], move |t, v| {
            t.conv2d(v[0], v[1], None, g2)
        }),
        primitive("conv2d.depthwise_strip", vec![("x", rand64(r, &[1, 4, 6, 6])?), ("w", rand64(r, &[4, 1, 5, 1])?), ("b", rand64(r, &[4])?)], move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), gs)
        }),
        primitive("linear", vec![("x", rand64(r, &[2, 5])?), ("w", rand64(r, &[3, 5])?), ("b", rand64(r, &[3])?)], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        primitive("matmul", vec![("a", rand64(r, &[2, 3, 4])?), ("b", rand64(r, &[2, 4, 5])?)], |t, v| t.matmul(v[0], v[1])),
        primitive("transpose", vec![("x", rand64(r, &[2, 3, 4])?)], |t, v| t.transpose(v[0])),
        primitive("reshape", vec![("x", rand64(r, &[2, 3, 4])?)], |t, v| t.reshape(v[0], &[6, 4])),
        primitive("softmax", vec![("x", rand64(r, &[2, 3, 4])?)], |t, v| t.softmax(v[0], 2)),
        primitive("softmax.axis1", vec![("x", rand64(r, &[2, 5])?)], |t, v| t.softmax(v[0], 1)),
        primitive("global_avg_pool", vec![("x", rand64(r, &[2, 3, 4, 4])?)], |t, v| t.global_avg_pool(v[0])),
        primitive("channel_shuffle", vec![("x", rand64(r, &[1, 8, 3, 3])?)], |t, v| t.channel_shuffle(v[0], 4)),
        primitive("concat", vec![("a", rand64(r, &[2, 2, 3, 3])?), ("b", rand64(r, &[2, 3, 3, 3])?)], |t, v| t.concat(&[v[0], v[1]])),
        primitive("narrow", vec![("x", rand64(r, &[2, 6, 3, 3])?)], |t, v| t.narrow(v[0], 2, 3)),
        primitive("add", vec![("a", rand64(r, &[2, 3, 4])?), ("b", rand64(r, &[2, 3, 4])?)], |t, v| t.add(v[0], v[1])),
        primitive("mul", vec![("a", rand64(r, &[2, 3, 4])?), ("b", rand64(r, &[2, 3, 4])?)], |t, v| t.mul(v[0], v[1])),
        primitive("mul_broadcast", vec![("x", rand64(r, &[2, 3, 4, 4])?), ("s", rand64(r, &[2, 3])?)], |t, v| t.mul_broadcast(v[0], v[1])),
        primitive("mul_broadcast.per_sample", vec![("x", rand64(r, &[2, 3, 4, 4])?), ("s", rand64(r, &[2, 1])?)], |t, v| {
            t.mul_broadcast(v[0], v[1])
        }),
        primitive("div_scalar", vec![("x", rand64(r, &[2, 3, 4])?), ("s", away_from_zero(r, &[1])?)], |t, v| t.div_scalar(v[0], v[1])),
        primitive("abs", vec![("x", away_from_zero(r, &[2, 3, 4])?)], |t, v| Ok(t.abs(v[0]))),
        primitive("scale", vec![("x", rand64(r, &[2, 3, 4])?)], |t, v| Ok(t.scale(v[0], -1.75))),
        primitive("silu", vec![("x", rand64(r, &[2, 3, 4])?.map(|v| 4.0 * v))], |t, v| Ok(t.silu(v[0]))),
        primitive("sigmoid", vec![("x", rand64(r, &[2, 3, 4])?.map(|v| 4.0 * v))], |t, v| Ok(t.sigmoid(v[0]))),
        primitive("upsample2x", vec![("x", rand64(r, &[2, 3, 3, 3])?)], |t, v| t.upsample2x(v[0])),
        primitive("maxpool", vec![("x", separated(r, &[2, 8, 6, 6])?)], |t, v| t.maxpool(v[0], 5)),
        primitive("sum", vec![("x", rand64(r, &[2, 3, 4])?)], |t, v| Ok(t.sum(v[0]))),
    ])
}

pub fn check(target: Target, seed: u64) -> Result<Report> {
    run(problem(target, seed)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let p = Problem {
            name: "sq".into(),
            groups: vec![(INPUT.into(), Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap())],
            loss: Box::new(|t, p| {
                let x = p.get(INPUT)?;
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            }),
            samples: None,
            nonzero: vec![],
        };
        let r = run(p, 0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.groups[0].max_grad, 4.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // x · stop_grad(x): the tape sees dL/dx = x, the true derivative is 2x.
        let p = Problem {
            name: "bad".into(),
            groups: vec![(INPUT.into(), Tensor::new(&[2], vec![0.5, -1.5]).unwrap())],
            loss: Box::new(|t, p| {
                let x = p.get(INPUT)?;
                let c = t.leaf(t.value(x).clone());
                let y = t.mul(x, c)?;
                Ok(t.sum(y))
            }),
            samples: None,
            nonzero: vec![],
        };
        let r = run(p, 0).unwrap();
        assert!(!r.passed());
        assert!((r.max_rel() - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn primitives_pass() {
        for p in primitive_problems(11).unwrap() {
            let r = run(p, 11).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn sampling_is_distinct_and_sorted() {
        let mut rng = Rng::new(5);
        let s = sample_indices(&mut rng, 100, 10);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(&mut rng, 4, 10), vec![0, 1, 2, 3]);
    }

    #[test]
    fn target_names_roundtrip() {
        for t in Target::ALL {
            assert_eq!(t.name().parse::<Target>().unwrap(), t);
        }
        assert!("yolo".parse::<Target>().is_err());
    }
}
