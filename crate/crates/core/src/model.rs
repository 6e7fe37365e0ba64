//! Baseline and DAONet detector topologies.
//!
//! Weight paths:
//!
//! | block | path |
//! |---|---|
//! | stem (stride 2) | `backbone.0.conv` |
//! | stage `i` in 1..=4 | `backbone.{i}.down`, `backbone.{i}.c2f` or `backbone.{i}.c2f_dsconv` |
//! | pyramid pooling | `sppf.cv1`, `sppf.cv2` |
//! | fusion module | `dafm.*` |
//! | neck fusion blocks | `neck.{0,1,3,5}.c2f[_dsconv]` |
//! | neck downsamples | `neck.{2,4}.conv` |
//! | head | `head.{scale}.{cls,reg}.{conv1,conv2,oahead,pred}` |

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::blocks::{C2f, C2fConfig, Sppf, UnitKind};
use crate::cost::CostReport;
use crate::dafm::{Dafm, DafmConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv, ConvSpec};
use crate::oahead::{HeadBranch, OaheadConfig};
use crate::rng::Rng;
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::Scalar;

/// Where C2f-DSConv blocks replace plain C2f blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DsconvScope {
    Backbone,
    BackboneAndNeck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub dafm: bool,
    pub oahead: bool,
    pub dsconv: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant { dafm: false, oahead: false, dsconv: false };
    pub const DAONET: Variant = Variant { dafm: true, oahead: true, dsconv: true };

    /// All eight flag combinations in ablation-table order.
    pub fn grid() -> [Variant; 8] {
        let v = |dafm, oahead, dsconv| Variant { dafm, oahead, dsconv };
        [
            v(false, false, false),
            v(true, false, false),
            v(false, true, false),
            v(false, false, true),
            v(true, true, false),
            v(true, false, true),
            v(false, true, true),
            v(true, true, true),
        ]
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Variant::BASELINE {
            return f.write_str("baseline");
        }
        if *self == Variant::DAONET {
            return f.write_str("daonet");
        }
        let names: Vec<&str> = [(self.dafm, "dafm"), (self.oahead, "oahead"), (self.dsconv, "dsconv")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `baseline`, `daonet`, or a `+`/`,`-separated subset of `dafm`, `oahead`, `dsconv`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => return Ok(Variant::BASELINE),
            "daonet" => return Ok(Variant::DAONET),
            _ => {}
        }
        let mut v = Variant::BASELINE;
        for part in s.split(['+', ',']) {
            match part.trim() {
                "dafm" => v.dafm = true,
                "oahead" => v.oahead = true,
                "dsconv" => v.dsconv = true,
                other => return Err(Error::config(format!("unknown variant component {other:?}"))),
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dsconv_scope: DsconvScope,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub num_classes: usize,
    pub input_size: usize,
    pub reg_bins: usize,
    pub dafm_shuffle_groups: usize,
    pub dafm_conv_groups: usize,
    pub oahead_kernels: Vec<usize>,
    pub oahead_reduction: usize,
    pub dsconv_square_k: usize,
    pub dsconv_strip_m: usize,
}

const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];
const BASE_REPEATS: [usize; 4] = [3, 6, 6, 3];
const NECK_REPEATS: usize = 3;

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        let d = DafmConfig::new(8);
        let o = OaheadConfig::new(8);
        Self {
            variant,
            dsconv_scope: DsconvScope::BackboneAndNeck,
            width_multiple: 0.25,
            depth_multiple: 0.33,
            num_classes: 6,
            input_size: 640,
            reg_bins: 16,
            dafm_shuffle_groups: d.shuffle_groups,
            dafm_conv_groups: d.conv_groups,
            oahead_kernels: o.dw_kernels,
            oahead_reduction: o.fc_reduction,
            dsconv_square_k: 3,
            dsconv_strip_m: 5,
        }
    }

    pub fn baseline() -> Self {
        Self::new(Variant::BASELINE)
    }

    pub fn daonet() -> Self {
        Self::new(Variant::DAONET)
    }

    /// Toy scale used for end-to-end gradient checks.
    pub fn toy(variant: Variant) -> Self {
        Self { width_multiple: 0.125, input_size: 64, ..Self::new(variant) }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// Round `c · width` to the nearest multiple of 8.
    pub fn width(&self, c: usize) -> Result<usize> {
        let scaled = c as f64 * self.width_multiple;
        let r = ((scaled / 8.0).round() as usize) * 8;
        if !scaled.is_finite() || r == 0 {
            return Err(Error::config(format!(
                "width multiple {} leaves {c} base channels with zero channels",
                self.width_multiple
            )));
        }
        Ok(r)
    }

    pub fn depth(&self, n: usize) -> Result<usize> {
        let r = (n as f64 * self.depth_multiple).round();
        if !r.is_finite() || r < 0.0 {
            return Err(Error::config(format!("invalid depth multiple {}", self.depth_multiple)));
        }
        Ok((r as usize).max(1))
    }

    pub fn channels(&self) -> Result<[usize; 5]> {
        let mut out = [0; 5];
        for (o, &c) in out.iter_mut().zip(&BASE_CHANNELS) {
            *o = self.width(c)?;
        }
        Ok(out)
    }

    fn dsconv_unit(&self) -> UnitKind {
        UnitKind::Dsconv { square_k: self.dsconv_square_k, strip_m: self.dsconv_strip_m }
    }

    fn neck_dsconv(&self) -> bool {
        self.variant.dsconv && self.dsconv_scope == DsconvScope::BackboneAndNeck
    }

    pub fn validate(&self) -> Result<()> {
        if self.reg_bins == 0 || self.num_classes == 0 {
            return Err(Error::config("num_classes and reg_bins must be positive"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config(format!("input size {} is not a positive multiple of 32", self.input_size)));
        }
        self.channels()?;
        for n in BASE_REPEATS {
            self.depth(n)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub down: Conv,
    pub c2f: C2f,
}

/// Classification and regression branches at one detection scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleHead {
    pub cls: HeadBranch,
    pub reg: HeadBranch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    /// `up(P5) ++ P4 → P4'`
    pub top4: C2f,
    /// `up(P4') ++ P3 → N3`
    pub top3: C2f,
    pub down3: Conv,
    /// `down(N3) ++ P4' → N4`
    pub bot4: C2f,
    pub down4: Conv,
    /// `down(N4) ++ P5 → N5`
    pub bot5: C2f,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput {
    pub cls: Var,
    pub reg: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: Conv,
    pub stages: Vec<Stage>,
    pub sppf: Sppf,
    pub dafm: Option<Dafm>,
    pub neck: Neck,
    pub head: Vec<ScaleHead>,
}

pub const STRIDES: [usize; 3] = [8, 16, 32];

fn c2f_block(prefix: &str, cin: usize, cout: usize, n: usize, shortcut: bool, unit: Option<UnitKind>) -> Result<C2f> {
    let (name, kind) = match unit {
        Some(u) => ("c2f_dsconv", u),
        None => ("c2f", UnitKind::Bottleneck),
    };
    let mut cfg = C2fConfig::new(cin, cout, n, kind);
    cfg.shortcut = shortcut;
    C2f::new(format!("{prefix}.{name}"), cfg)
}

fn conv_silu(path: String, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
    Conv::new(path, ConvSpec::new(cin, cout, k).with_stride(stride).with_activation(Activation::Silu))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels()?;
        let v = config.variant;
        let stem = conv_silu("backbone.0.conv".into(), 3, ch[0], 3, 2)?;
        let bb_unit = v.dsconv.then(|| config.dsconv_unit());
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let p = format!("backbone.{}", i + 1);
            let down = conv_silu(format!("{p}.down"), ch[i], ch[i + 1], 3, 2)?;
            let n = config.depth(BASE_REPEATS[i])?;
            stages.push(Stage { down, c2f: c2f_block(&p, ch[i + 1], ch[i + 1], n, true, bb_unit)? });
        }
        let (c3, c4, c5) = (ch[2], ch[3], ch[4]);
        let sppf = Sppf::new("sppf", c5)?;
        let dafm = if v.dafm {
            let cfg = DafmConfig::new(c5)
                .with_shuffle_groups(config.dafm_shuffle_groups)
                .with_conv_groups(config.dafm_conv_groups);
            Some(Dafm::new("dafm", cfg)?)
        } else {
            None
        };
        let nn_ = config.depth(NECK_REPEATS)?;
        let nu = config.neck_dsconv().then(|| config.dsconv_unit());
        let neck = Neck {
            top4: c2f_block("neck.0", c5 + c4, c4, nn_, false, nu)?,
            top3: c2f_block("neck.1", c4 + c3, c3, nn_, false, nu)?,
            down3: conv_silu("neck.2.conv".into(), c3, c3, 3, 2)?,
            bot4: c2f_block("neck.3", c3 + c4, c4, nn_, false, nu)?,
            down4: conv_silu("neck.4.conv".into(), c4, c4, 3, 2)?,
            bot5: c2f_block("neck.5", c4 + c5, c5, nn_, false, nu)?,
        };
        let reg_out = 4 * config.reg_bins;
        let reg_hidden = 16.max(c3 / 4).max(reg_out);
        let cls_hidden = c3.max(config.num_classes.min(100));
        let oa = v.oahead.then(|| OaheadConfig {
            channels: 0,
            dw_kernels: config.oahead_kernels.clone(),
            fc_reduction: config.oahead_reduction,
        });
        let head = [c3, c4, c5]
            .iter()
            .enumerate()
            .map(|(s, &cin)| -> Result<ScaleHead> {
                Ok(ScaleHead {
                    cls: HeadBranch::new(&format!("head.{s}.cls"), cin, cls_hidden, config.num_classes, oa.as_ref())?,
                    reg: HeadBranch::new(&format!("head.{s}.reg"), cin, reg_hidden, reg_out, oa.as_ref())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, stem, stages, sppf, dafm, neck, head })
    }

    /// Builds the topology and draws every weight from `rng` in path order.
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<(Model, WeightStore)> {
        let m = Model::new(config)?;
        let mut s = WeightStore::new();
        m.init(&mut s, rng)?;
        Ok((m, s))
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        self.stem.init(store, rng)?;
        for st in &self.stages {
            st.down.init(store, rng)?;
            st.c2f.init(store, rng)?;
        }
        self.sppf.init(store, rng)?;
        if let Some(d) = &self.dafm {
            d.init(store, rng)?;
        }
        let n = &self.neck;
        n.top4.init(store, rng)?;
        n.top3.init(store, rng)?;
        n.down3.init(store, rng)?;
        n.bot4.init(store, rng)?;
        n.down4.init(store, rng)?;
        n.bot5.init(store, rng)?;
        for h in &self.head {
            h.cls.init(store, rng)?;
            h.reg.init(store, rng)?;
        }
        Ok(())
    }

    /// Runs the detector on an `N×3×S×S` input; returns one output per stride in [`STRIDES`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Vec<ScaleOutput>> {
        let d = tape.dims(x).to_vec();
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::shape(format!("expected N×3×S×S input, got {d:?}")));
        }
        if d[2] % 32 != 0 || d[3] % 32 != 0 {
            return Err(Error::shape(format!("input size {}×{} not divisible by 32", d[2], d[3])));
        }
        let mut y = self.stem.forward(tape, p, x)?;
        let mut taps = Vec::with_capacity(4);
        for st in &self.stages {
            y = st.down.forward(tape, p, y)?;
            y = st.c2f.forward(tape, p, y)?;
            taps.push(y);
        }
        let (p3, p4) = (taps[1], taps[2]);
        let mut p5 = self.sppf.forward(tape, p, y)?;
        if let Some(dafm) = &self.dafm {
            p5 = dafm.forward(tape, p, p5)?;
        }
        let n = &self.neck;
        let up = tape.upsample2x(p5)?;
        let cat = tape.concat(&[up, p4])?;
        let t4 = n.top4.forward(tape, p, cat)?;
        let up = tape.upsample2x(t4)?;
        let cat = tape.concat(&[up, p3])?;
        let n3 = n.top3.forward(tape, p, cat)?;
        let dn = n.down3.forward(tape, p, n3)?;
        let cat = tape.concat(&[dn, t4])?;
        let n4 = n.bot4.forward(tape, p, cat)?;
        let dn = n.down4.forward(tape, p, n4)?;
        let cat = tape.concat(&[dn, p5])?;
        let n5 = n.bot5.forward(tape, p, cat)?;
        [n3, n4, n5]
            .iter()
            .zip(&self.head)
            .map(|(&f, h)| Ok(ScaleOutput { cls: h.cls.forward(tape, p, f)?, reg: h.reg.forward(tape, p, f)? }))
            .collect()
    }

    /// Per-layer costs for one `S×S` image at the configured input size.
    pub fn cost_report(&self) -> Result<CostReport> {
        self.cost_at(self.config.input_size)
    }

    pub fn cost_at(&self, size: usize) -> Result<CostReport> {
        if size == 0 || size % 32 != 0 {
            return Err(Error::config(format!("image size {size} is not a positive multiple of 32")));
        }
        let mut r = CostReport::new();
        let (mut h, mut w) = self.stem.cost(size, size, &mut r)?;
        let mut sizes = Vec::with_capacity(4);
        for st in &self.stages {
            (h, w) = st.down.cost(h, w, &mut r)?;
            st.c2f.cost(h, w, &mut r)?;
            sizes.push((h, w));
        }
        self.sppf.cost(h, w, &mut r)?;
        if let Some(d) = &self.dafm {
            d.cost(h, w, &mut r)?;
        }
        let n = &self.neck;
        let [_, s3, s4, s5] = [sizes[0], sizes[1], sizes[2], sizes[3]];
        n.top4.cost(s4.0, s4.1, &mut r)?;
        n.top3.cost(s3.0, s3.1, &mut r)?;
        n.down3.cost(s3.0, s3.1, &mut r)?;
        n.bot4.cost(s4.0, s4.1, &mut r)?;
        n.down4.cost(s4.0, s4.1, &mut r)?;
        n.bot5.cost(s5.0, s5.1, &mut r)?;
        for (hd, &(hh, ww)) in self.head.iter().zip(&[s3, s4, s5]) {
            hd.cls.cost(hh, ww, &mut r)?;
            hd.reg.cost(hh, ww, &mut r)?;
        }
        Ok(r)
    }
}

pub fn cost_report(config: &ModelConfig) -> Result<CostReport> {
    Model::new(config.clone())?.cost_report()
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: CostReport,
}

/// Cost reports of all eight flag combinations, in ablation-table order.
pub fn ablation_grid(base: &ModelConfig) -> Result<Vec<AblationRow>> {
    Variant::grid()
        .into_iter()
        .map(|variant| Ok(AblationRow { variant, report: cost_report(&base.with_variant(variant))? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn variant_parsing() {
        assert_eq!("baseline".parse::<Variant>().unwrap(), Variant::BASELINE);
        assert_eq!("daonet".parse::<Variant>().unwrap(), Variant::DAONET);
        assert_eq!("dafm+oahead+dsconv".parse::<Variant>().unwrap(), Variant::DAONET);
        let v: Variant = "oahead,dsconv".parse().unwrap();
        assert!(!v.dafm && v.oahead && v.dsconv);
        assert_eq!(v.to_string(), "oahead+dsconv");
        assert!("fast".parse::<Variant>().is_err());
    }

    #[test]
    fn nano_channel_plan() {
        let c = ModelConfig::baseline();
        assert_eq!(c.channels().unwrap(), [16, 32, 64, 128, 256]);
        let d: Vec<_> = BASE_REPEATS.iter().map(|&n| c.depth(n).unwrap()).collect();
        assert_eq!(d, [1, 2, 2, 1]);
        assert_eq!(ModelConfig::toy(Variant::BASELINE).channels().unwrap(), [8, 16, 32, 64, 128]);
    }

    #[test]
    fn zero_width_rejected() {
        let c = ModelConfig { width_multiple: 0.01, ..ModelConfig::baseline() };
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn tape_flops_match_cost_report() {
        for v in [Variant::BASELINE, Variant::DAONET] {
            let cfg = ModelConfig::toy(v);
            let (m, s) = Model::build(cfg, &mut Rng::new(3)).unwrap();
            let report = m.cost_report().unwrap();
            assert_eq!(report.total_params(), s.param_count());
            let mut t = Tape::<f32>::new();
            let p = t.bind(&s);
            let x = t.leaf(Tensor::zeros(&[1, 3, 64, 64]).unwrap());
            m.forward(&mut t, &p, x).unwrap();
            assert_eq!(t.flops(), report.total_flops(), "{v}");
        }
    }
}
