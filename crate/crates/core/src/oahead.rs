//! Occlusion-aware gating block and the detection-head branch built on it.
//!
//! For an input `x` the block computes, per depthwise kernel size `k`,
//! `d_k = dw_k(x) + x`, fuses `concat(d_k)` with a pointwise conv, pools the
//! result to a channel descriptor and maps it through `fc1 → SiLU → fc2 →
//! sigmoid` to a gate in `(0, 1)^C`. The output is `x ⊙ gate`.

use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Conv, ConvSpec, Linear, LinearSpec};
use crate::rng::Rng;
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OaheadConfig {
    pub channels: usize,
    pub dw_kernels: Vec<usize>,
    pub fc_reduction: usize,
}

impl OaheadConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, dw_kernels: vec![3, 5], fc_reduction: 4 }
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.fc_reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.fc_reduction == 0 || self.hidden() == 0 {
            return Err(Error::config(format!(
                "OAHead: {} channels with reduction {} leaves no hidden units",
                self.channels, self.fc_reduction
            )));
        }
        if self.dw_kernels.is_empty() || self.dw_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(format!("OAHead: kernels {:?} must be non-empty and odd", self.dw_kernels)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OaheadParts {
    /// `[N, C]` gate.
    pub gate: Var,
    pub out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Oahead {
    pub prefix: String,
    pub cfg: OaheadConfig,
    pub dw: Vec<Conv>,
    pub pw: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Oahead {
    pub fn new(prefix: impl Into<String>, cfg: OaheadConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = prefix.into();
        let c = cfg.channels;
        let dw = cfg
            .dw_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| Conv::new(format!("{prefix}.dw.{i}"), ConvSpec::depthwise(c, k, k)))
            .collect::<Result<_>>()?;
        Ok(Self {
            dw,
            pw: Conv::new(format!("{prefix}.pw"), ConvSpec::new(cfg.dw_kernels.len() * c, c, 1))?,
            fc1: Linear::new(format!("{prefix}.fc1"), LinearSpec::new(c, cfg.hidden()))?,
            fc2: Linear::new(format!("{prefix}.fc2"), LinearSpec::new(cfg.hidden(), c))?,
            prefix,
            cfg,
        })
    }

    pub fn from_store(prefix: &str, store: &WeightStore) -> Result<Self> {
        let mut kernels = Vec::new();
        while let Some(t) = store.get(&format!("{prefix}.dw.{}.weight", kernels.len())) {
            kernels.push(t.dims().get(2).copied().unwrap_or(0));
        }
        let [c, ..] = nn::stored_conv_dims(store, &format!("{prefix}.pw"))?;
        let fc1 = nn::linear_from_store(store, &format!("{prefix}.fc1"))?;
        let hidden = fc1.spec.out_features;
        if hidden == 0 || c % hidden != 0 {
            return Err(Error::Format {
                field: format!("{prefix}.fc1.weight"),
                msg: format!("hidden width {hidden} does not divide {c} channels"),
            });
        }
        let cfg = OaheadConfig { channels: c, dw_kernels: kernels, fc_reduction: c / hidden };
        let m = Self::new(prefix, cfg).map_err(|e| Error::Format { field: prefix.to_string(), msg: e.to_string() })?;
        m.check_store(store)?;
        Ok(m)
    }

    pub fn check_store(&self, store: &WeightStore) -> Result<()> {
        for c in self.dw.iter().chain([&self.pw]) {
            c.check_store(store)?;
        }
        self.fc1.check_store(store)?;
        self.fc2.check_store(store)
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        for c in self.dw.iter().chain([&self.pw]) {
            c.init(store, rng)?;
        }
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward_parts<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<OaheadParts> {
        let dims = tape.dims(x);
        if dims.len() != 4 || dims[1] != self.cfg.channels {
            return Err(Error::shape(format!(
                "{}: channel mismatch, expected N×{}×H×W input, got {dims:?}",
                self.prefix, self.cfg.channels
            )));
        }
        let mut branches = Vec::with_capacity(self.dw.len());
        for conv in &self.dw {
            let d = conv.forward(tape, p, x)?;
            branches.push(tape.add(d, x)?);
        }
        let fused = tape.concat(&branches)?;
        let fused = self.pw.forward(tape, p, fused)?;
        let desc = tape.global_avg_pool(fused)?;
        let hidden = self.fc1.forward(tape, p, desc)?;
        let hidden = tape.silu(hidden);
        let logits = self.fc2.forward(tape, p, hidden)?;
        let gate = tape.sigmoid(logits);
        let out = tape.mul_broadcast(x, gate)?;
        Ok(OaheadParts { gate, out })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, p, x)?.out)
    }

    pub fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<()> {
        for c in self.dw.iter().chain([&self.pw]) {
            c.cost(h, w, report)?;
        }
        self.fc1.cost(report);
        self.fc2.cost(report);
        Ok(())
    }
}

/// How a head branch refines features between its first conv and predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum Refine {
    /// Second 3×3 conv (plain decoupled head).
    Conv(Conv),
    /// Occlusion-aware gate in place of the second conv.
    Oahead(Oahead),
}

/// One classification or regression branch at one scale:
/// `conv3x3 → refine → 1×1 predictor`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBranch {
    pub conv1: Conv,
    pub refine: Refine,
    pub pred: Conv,
}

/// Features seen inside a head branch, exposed for verification.
#[derive(Clone, Copy, Debug)]
pub struct BranchTrace {
    pub conv1: Var,
    pub pre_pred: Var,
    pub out: Var,
}

impl HeadBranch {
    pub fn new(prefix: &str, in_channels: usize, hidden: usize, outputs: usize, oahead: Option<&OaheadConfig>) -> Result<Self> {
        let silu = Activation::Silu;
        let conv1 = Conv::new(format!("{prefix}.conv1"), ConvSpec::new(in_channels, hidden, 3).with_activation(silu))?;
        let refine = match oahead {
            Some(cfg) => {
                let cfg = OaheadConfig { channels: hidden, ..cfg.clone() };
                Refine::Oahead(Oahead::new(format!("{prefix}.oahead"), cfg)?)
            }
            None => Refine::Conv(Conv::new(format!("{prefix}.conv2"), ConvSpec::new(hidden, hidden, 3).with_activation(silu))?),
        };
        let pred = Conv::new(format!("{prefix}.pred"), ConvSpec::new(hidden, outputs, 1))?;
        Ok(Self { conv1, refine, pred })
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        match &self.refine {
            Refine::Conv(c) => c.init(store, rng)?,
            Refine::Oahead(o) => o.init(store, rng)?,
        }
        self.pred.init(store, rng)
    }

    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<BranchTrace> {
        let conv1 = self.conv1.forward(tape, p, x)?;
        let pre_pred = match &self.refine {
            Refine::Conv(c) => c.forward(tape, p, conv1)?,
            Refine::Oahead(o) => o.forward(tape, p, conv1)?,
        };
        let out = self.pred.forward(tape, p, pre_pred)?;
        Ok(BranchTrace { conv1, pre_pred, out })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        Ok(self.trace(tape, p, x)?.out)
    }

    pub fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<()> {
        let (h, w) = self.conv1.cost(h, w, report)?;
        match &self.refine {
            Refine::Conv(c) => {
                c.cost(h, w, report)?;
            }
            Refine::Oahead(o) => o.cost(h, w, report)?,
        }
        self.pred.cost(h, w, report)?;
        Ok(())
    }
}
