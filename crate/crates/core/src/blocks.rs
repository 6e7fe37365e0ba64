//! Cross-stage partial (C2f) blocks and spatial pyramid pooling.

use crate::cost::CostReport;
use crate::dsconv::{Dsconv, DsconvConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Conv, ConvSpec};
use crate::rng::Rng;
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::Scalar;

/// What each repeated unit inside a C2f block is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// Two 3×3 convs with SiLU.
    Bottleneck,
    /// A dynamic synthesis convolution with the given kernel sizes.
    Dsconv { square_k: usize, strip_m: usize },
}

impl UnitKind {
    pub fn dsconv() -> Self {
        let d = DsconvConfig::new(1);
        UnitKind::Dsconv { square_k: d.square_k, strip_m: d.strip_m }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct C2fConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_blocks: usize,
    pub shortcut: bool,
    pub unit: UnitKind,
    /// Activation of the expand / compress 1×1 convs.
    pub activation: Activation,
}

impl C2fConfig {
    pub fn new(in_channels: usize, out_channels: usize, n_blocks: usize, unit: UnitKind) -> Self {
        Self { in_channels, out_channels, n_blocks, shortcut: true, unit, activation: Activation::Silu }
    }

    pub fn hidden(&self) -> usize {
        self.out_channels / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Unit {
    Bottleneck { cv1: Conv, cv2: Conv },
    Dsconv(Dsconv),
}

impl Unit {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        match self {
            Unit::Bottleneck { cv1, cv2 } => {
                let y = cv1.forward(tape, p, x)?;
                cv2.forward(tape, p, y)
            }
            Unit::Dsconv(d) => d.forward(tape, p, x),
        }
    }

    fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        match self {
            Unit::Bottleneck { cv1, cv2 } => {
                cv1.init(store, rng)?;
                cv2.init(store, rng)
            }
            Unit::Dsconv(d) => d.init(store, rng),
        }
    }

    fn check_store(&self, store: &WeightStore) -> Result<()> {
        match self {
            Unit::Bottleneck { cv1, cv2 } => {
                cv1.check_store(store)?;
                cv2.check_store(store)
            }
            Unit::Dsconv(d) => d.check_store(store),
        }
    }

    fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<()> {
        match self {
            Unit::Bottleneck { cv1, cv2 } => {
                cv1.cost(h, w, report)?;
                cv2.cost(h, w, report)?;
                Ok(())
            }
            Unit::Dsconv(d) => d.cost(h, w, report),
        }
    }
}

/// `cv1` expands to `2h` channels and splits into two halves; each unit
/// consumes the newest feature and appends its output; `cv2` compresses the
/// concatenation of all `2 + n` features.
#[derive(Clone, Debug, PartialEq)]
pub struct C2f {
    pub prefix: String,
    pub cfg: C2fConfig,
    pub cv1: Conv,
    pub units: Vec<Unit>,
    pub cv2: Conv,
}

impl C2f {
    pub fn new(prefix: impl Into<String>, cfg: C2fConfig) -> Result<Self> {
        let prefix = prefix.into();
        if cfg.out_channels % 2 != 0 {
            return Err(Error::config(format!(
                "{prefix}: odd hidden channels, {} outputs cannot split evenly",
                cfg.out_channels
            )));
        }
        let h = cfg.hidden();
        let act = cfg.activation;
        let cv1 = Conv::new(format!("{prefix}.cv1"), ConvSpec::new(cfg.in_channels, 2 * h, 1).with_activation(act))?;
        let units = (0..cfg.n_blocks)
            .map(|i| -> Result<Unit> {
                let up = format!("{prefix}.m.{i}");
                Ok(match cfg.unit {
                    UnitKind::Bottleneck => {
                        let spec = ConvSpec::new(h, h, 3).with_activation(Activation::Silu);
                        Unit::Bottleneck { cv1: Conv::new(format!("{up}.cv1"), spec)?, cv2: Conv::new(format!("{up}.cv2"), spec)? }
                    }
                    UnitKind::Dsconv { square_k, strip_m } => {
                        Unit::Dsconv(Dsconv::new(up, DsconvConfig { channels: h, square_k, strip_m })?)
                    }
                })
            })
            .collect::<Result<_>>()?;
        let cv2 = Conv::new(
            format!("{prefix}.cv2"),
            ConvSpec::new((2 + cfg.n_blocks) * h, cfg.out_channels, 1).with_activation(act),
        )?;
        Ok(Self { prefix, cfg, cv1, units, cv2 })
    }

    /// Rebuilds a C2f-DSConv block from weights under `prefix`.
    pub fn dsconv_from_store(prefix: &str, store: &WeightStore, shortcut: bool, activation: Activation) -> Result<Self> {
        let [two_h, cin, ..] = nn::stored_conv_dims(store, &format!("{prefix}.cv1"))?;
        let [cout, ..] = nn::stored_conv_dims(store, &format!("{prefix}.cv2"))?;
        let n = (0..).take_while(|i| store.contains(&format!("{prefix}.m.{i}.dw_square.weight"))).count();
        let unit = if n == 0 {
            UnitKind::dsconv()
        } else {
            let d = Dsconv::from_store(&format!("{prefix}.m.0"), store)?;
            UnitKind::Dsconv { square_k: d.cfg.square_k, strip_m: d.cfg.strip_m }
        };
        if two_h != cout {
            return Err(Error::Format {
                field: format!("{prefix}.cv1.weight"),
                msg: format!("expands to {two_h} channels but block outputs {cout}"),
            });
        }
        let cfg = C2fConfig { in_channels: cin, out_channels: cout, n_blocks: n, shortcut, unit, activation };
        let m = Self::new(prefix, cfg).map_err(|e| Error::Format { field: prefix.to_string(), msg: e.to_string() })?;
        m.check_store(store)?;
        Ok(m)
    }

    pub fn check_store(&self, store: &WeightStore) -> Result<()> {
        self.cv1.check_store(store)?;
        for u in &self.units {
            u.check_store(store)?;
        }
        self.cv2.check_store(store)
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        self.cv1.init(store, rng)?;
        for u in &self.units {
            u.init(store, rng)?;
        }
        self.cv2.init(store, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        let y = self.cv1.forward(tape, p, x)?;
        let mut feats = tape.chunk(y, 2)?;
        for u in &self.units {
            let last = *feats.last().expect("two halves");
            let mut out = u.forward(tape, p, last)?;
            if self.cfg.shortcut {
                out = tape.add(last, out)?;
            }
            feats.push(out);
        }
        let cat = tape.concat(&feats)?;
        self.cv2.forward(tape, p, cat)
    }

    pub fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<()> {
        self.cv1.cost(h, w, report)?;
        for u in &self.units {
            u.cost(h, w, report)?;
        }
        self.cv2.cost(h, w, report)?;
        Ok(())
    }
}

/// Spatial pyramid pooling (fast): 1×1 reduce to `C/2`, three cascaded 5×5
/// stride-1 max pools, concatenation of all four maps, 1×1 back to `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf {
    pub cv1: Conv,
    pub cv2: Conv,
    pub pool: usize,
}

impl Sppf {
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        let h = channels / 2;
        let silu = Activation::Silu;
        Ok(Self {
            cv1: Conv::new(format!("{prefix}.cv1"), ConvSpec::new(channels, h, 1).with_activation(silu))?,
            cv2: Conv::new(format!("{prefix}.cv2"), ConvSpec::new(4 * h, channels, 1).with_activation(silu))?,
            pool: 5,
        })
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        self.cv1.init(store, rng)?;
        self.cv2.init(store, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        let y0 = self.cv1.forward(tape, p, x)?;
        let y1 = tape.maxpool(y0, self.pool)?;
        let y2 = tape.maxpool(y1, self.pool)?;
        let y3 = tape.maxpool(y2, self.pool)?;
        let cat = tape.concat(&[y0, y1, y2, y3])?;
        self.cv2.forward(tape, p, cat)
    }

    pub fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<()> {
        self.cv1.cost(h, w, report)?;
        self.cv2.cost(h, w, report)?;
        Ok(())
    }
}
