//! Dynamic synthesis convolution.
//!
//! Three depthwise-separable branches, a `k×k` square kernel and `m×1` / `1×m`
//! strips, run on the same input. Pooled channel descriptors go through one
//! fully connected layer to three scores; their softmax gives per-sample
//! weights `α` on the simplex and the output is `Σ αᵢ·Fᵢ`.

use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::nn::{self, Conv, ConvSpec, Linear, LinearSpec};
use crate::rng::Rng;
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::Scalar;

pub const BRANCHES: [&str; 3] = ["square", "vert", "horz"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DsconvConfig {
    pub channels: usize,
    pub square_k: usize,
    pub strip_m: usize,
}

impl DsconvConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, square_k: 3, strip_m: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("DSConv: zero channels"));
        }
        if self.square_k % 2 == 0 || self.strip_m % 2 == 0 {
            return Err(Error::config(format!(
                "DSConv: kernels k={} m={} must be odd to preserve size",
                self.square_k, self.strip_m
            )));
        }
        Ok(())
    }
}

/// One depthwise-separable branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableBranch {
    pub dw: Conv,
    pub pw: Conv,
}

impl SeparableBranch {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        let d = self.dw.forward(tape, p, x)?;
        self.pw.forward(tape, p, d)
    }

    pub fn convs(&self) -> [&Conv; 2] {
        [&self.dw, &self.pw]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DsconvParts {
    /// `[N, 3]` branch weights.
    pub alpha: Var,
    /// Square, vertical and horizontal branch outputs.
    pub branches: [Var; 3],
    pub out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dsconv {
    pub prefix: String,
    pub cfg: DsconvConfig,
    pub square: SeparableBranch,
    pub vert: SeparableBranch,
    pub horz: SeparableBranch,
    pub fc_score: Linear,
}

impl Dsconv {
    pub fn new(prefix: impl Into<String>, cfg: DsconvConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = prefix.into();
        let c = cfg.channels;
        let branch = |name: &str, kh: usize, kw: usize| -> Result<SeparableBranch> {
            Ok(SeparableBranch {
                dw: Conv::new(format!("{prefix}.dw_{name}"), ConvSpec::depthwise(c, kh, kw))?,
                pw: Conv::new(format!("{prefix}.pw_{name}"), ConvSpec::new(c, c, 1))?,
            })
        };
        let (k, m) = (cfg.square_k, cfg.strip_m);
        Ok(Self {
            square: branch("square", k, k)?,
            vert: branch("vert", m, 1)?,
            horz: branch("horz", 1, m)?,
            fc_score: Linear::new(format!("{prefix}.fc_score"), LinearSpec::new(c, 3))?,
            prefix,
            cfg,
        })
    }

    pub fn from_store(prefix: &str, store: &WeightStore) -> Result<Self> {
        let [c, _, k, _] = nn::stored_conv_dims(store, &format!("{prefix}.dw_square"))?;
        let [_, _, m, _] = nn::stored_conv_dims(store, &format!("{prefix}.dw_vert"))?;
        let cfg = DsconvConfig { channels: c, square_k: k, strip_m: m };
        let d = Self::new(prefix, cfg).map_err(|e| Error::Format { field: prefix.to_string(), msg: e.to_string() })?;
        d.check_store(store)?;
        Ok(d)
    }

    pub fn branches(&self) -> [&SeparableBranch; 3] {
        [&self.square, &self.vert, &self.horz]
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> + '_ {
        self.branches().into_iter().flat_map(|b| b.convs())
    }

    pub fn check_store(&self, store: &WeightStore) -> Result<()> {
        for c in self.convs() {
            c.check_store(store)?;
        }
        self.fc_score.check_store(store)
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        for c in self.convs() {
            c.init(store, rng)?;
        }
        self.fc_score.init(store, rng)
    }

    /// `softmax(fc_score(gap(x)))`, shape `[N, 3]`.
    pub fn weights<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let desc = tape.global_avg_pool(x)?;
        let scores = self.fc_score.forward(tape, p, desc)?;
        tape.softmax(scores, 1)
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let dims = tape.dims(x);
        if dims.len() != 4 || dims[1] != self.cfg.channels {
            return Err(Error::shape(format!(
                "{}: channel mismatch, expected N×{}×H×W input, got {dims:?}",
                self.prefix, self.cfg.channels
            )));
        }
        Ok(())
    }

    pub fn forward_parts<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<DsconvParts> {
        let alpha = self.weights(tape, p, x)?;
        let mut outs = [x; 3];
        for (slot, branch) in outs.iter_mut().zip(self.branches()) {
            *slot = branch.forward(tape, p, x)?;
        }
        let mut acc: Option<Var> = None;
        for (i, &f) in outs.iter().enumerate() {
            let a = tape.narrow(alpha, i, 1)?;
            let term = tape.mul_broadcast(f, a)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, term)?,
                None => term,
            });
        }
        Ok(DsconvParts { alpha, branches: outs, out: acc.expect("three branches") })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, p, x)?.out)
    }

    pub fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<()> {
        for c in self.convs() {
            c.cost(h, w, report)?;
        }
        self.fc_score.cost(report);
        Ok(())
    }
}
