//! Dual-attention fusion: a convolutional local branch and a channel
//! self-attention branch, summed.
//!
//! Branch 1 is `conv3x3(shuffle(group_dw(pw1(y))))`: a 1×1 conv, the channels
//! split into `g` groups with a 3×3 depthwise conv per group, concatenation,
//! a `g`-way channel shuffle, then a 3×3 conv.
//!
//! Branch 2 generates Q, K, V with a 1×1 conv to `3C` channels followed by a
//! 3×3 depthwise conv, and evaluates `V · softmax(K Q / |a|)` per batch item
//! with Q, V viewed as `(HW) × C` and K as `C × (HW)`. The attention map is
//! `C × C` and row-stochastic. The result goes through a 3×3 conv and the
//! input is added back.
//!
//! The two 3×3 convs are grouped (`conv_groups`, default 8); with dense 3×3
//! convs the module alone would outweigh the rest of a nano-scale detector.

use crate::cost::{Cost, CostReport};
use crate::error::{Error, Result};
use crate::nn::{self, Conv, ConvSpec};
use crate::rng::Rng;
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DafmConfig {
    pub channels: usize,
    pub shuffle_groups: usize,
    pub conv_groups: usize,
    /// Initial value of the learnable attention scale; `None` means `sqrt(C)`.
    pub attn_scale_init: Option<f32>,
}

impl DafmConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, shuffle_groups: 4, conv_groups: 8, attn_scale_init: None }
    }

    pub fn with_shuffle_groups(mut self, g: usize) -> Self {
        self.shuffle_groups = g;
        self
    }

    pub fn with_conv_groups(mut self, g: usize) -> Self {
        self.conv_groups = g;
        self
    }

    pub fn scale_init(&self) -> f32 {
        self.attn_scale_init.unwrap_or((self.channels as f32).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || self.shuffle_groups == 0 || c % self.shuffle_groups != 0 {
            return Err(Error::config(format!("DAFM: {c} channels not divisible by {} shuffle groups", self.shuffle_groups)));
        }
        if self.conv_groups == 0 || c % self.conv_groups != 0 {
            return Err(Error::config(format!("DAFM: {c} channels not divisible by {} conv groups", self.conv_groups)));
        }
        if !(self.scale_init() > 0.0) {
            return Err(Error::config("DAFM: attention scale must start positive"));
        }
        Ok(())
    }
}

/// Intermediate results of one DAFM evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DafmParts {
    /// Branch 1 output.
    pub conv: Var,
    /// Branch 2 output, residual included.
    pub att: Var,
    /// `[N, C, C]` attention map.
    pub attn_map: Var,
    pub out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dafm {
    pub prefix: String,
    pub cfg: DafmConfig,
    pub b1_pw1: Conv,
    pub b1_group_dw: Vec<Conv>,
    pub b1_conv3: Conv,
    pub b2_pw: Conv,
    pub b2_dw: Conv,
    pub b2_out: Conv,
}

impl Dafm {
    pub fn new(prefix: impl Into<String>, cfg: DafmConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = prefix.into();
        let c = cfg.channels;
        let per_group = c / cfg.shuffle_groups;
        let p = |name: &str| format!("{prefix}.{name}");
        Ok(Self {
            b1_pw1: Conv::new(p("b1_pw1"), ConvSpec::new(c, c, 1))?,
            b1_group_dw: (0..cfg.shuffle_groups)
                .map(|i| Conv::new(p(&format!("b1_group_dw.{i}")), ConvSpec::depthwise(per_group, 3, 3)))
                .collect::<Result<_>>()?,
            b1_conv3: Conv::new(p("b1_conv3"), ConvSpec::new(c, c, 3).with_groups(cfg.conv_groups))?,
            b2_pw: Conv::new(p("b2_pw"), ConvSpec::new(c, 3 * c, 1))?,
            b2_dw: Conv::new(p("b2_dw"), ConvSpec::depthwise(3 * c, 3, 3))?,
            b2_out: Conv::new(p("b2_out"), ConvSpec::new(c, c, 3).with_groups(cfg.conv_groups))?,
            prefix,
            cfg,
        })
    }

    /// Reconstructs the module from weights stored under `prefix`.
    pub fn from_store(prefix: &str, store: &WeightStore) -> Result<Self> {
        let [c, ..] = nn::stored_conv_dims(store, &format!("{prefix}.b1_pw1"))?;
        let groups = (0..).take_while(|i| store.contains(&format!("{prefix}.b1_group_dw.{i}.weight"))).count();
        let [_, cig, ..] = nn::stored_conv_dims(store, &format!("{prefix}.b1_conv3"))?;
        if groups == 0 || cig == 0 || c % cig != 0 {
            return Err(Error::Format {
                field: format!("{prefix}.b1_group_dw"),
                msg: format!("cannot infer DAFM groups for {c} channels"),
            });
        }
        let a = store.require(&format!("{prefix}.a"))?;
        let mut cfg = DafmConfig::new(c).with_shuffle_groups(groups).with_conv_groups(c / cig);
        cfg.attn_scale_init = Some(a.data()[0].abs());
        let m = Self::new(prefix, cfg).map_err(|e| Error::Format { field: prefix.to_string(), msg: e.to_string() })?;
        m.check_store(store)?;
        Ok(m)
    }

    pub fn scale_path(&self) -> String {
        format!("{}.a", self.prefix)
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> + '_ {
        std::iter::once(&self.b1_pw1)
            .chain(&self.b1_group_dw)
            .chain([&self.b1_conv3, &self.b2_pw, &self.b2_dw, &self.b2_out])
    }

    pub fn check_store(&self, store: &WeightStore) -> Result<()> {
        for c in self.convs() {
            c.check_store(store)?;
        }
        nn::check_dims(store, &self.scale_path(), &[1])
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        for c in self.convs() {
            c.init(store, rng)?;
        }
        store.insert(self.scale_path(), Tensor::scalar(self.cfg.scale_init()))
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, y: Var) -> Result<()> {
        let cin = tape.dims(y).get(1).copied();
        if tape.dims(y).len() != 4 || cin != Some(self.cfg.channels) {
            return Err(Error::shape(format!(
                "{}: expected N×{}×H×W input, got {:?}",
                self.prefix,
                self.cfg.channels,
                tape.dims(y)
            )));
        }
        Ok(())
    }

    pub fn branch1<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, y: Var) -> Result<Var> {
        self.check_input(tape, y)?;
        let x = self.b1_pw1.forward(tape, p, y)?;
        let groups = tape.chunk(x, self.cfg.shuffle_groups)?;
        let mut outs = Vec::with_capacity(groups.len());
        for (conv, part) in self.b1_group_dw.iter().zip(groups) {
            outs.push(conv.forward(tape, p, part)?);
        }
        let cat = tape.concat(&outs)?;
        let shuffled = tape.channel_shuffle(cat, self.cfg.shuffle_groups)?;
        self.b1_conv3.forward(tape, p, shuffled)
    }

    /// Branch 2 output and its attention map.
    pub fn branch2<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, y: Var) -> Result<(Var, Var)> {
        self.check_input(tape, y)?;
        let qkv = self.b2_pw.forward(tape, p, y)?;
        let qkv = self.b2_dw.forward(tape, p, qkv)?;
        let [q, k, v]: [Var; 3] = tape.chunk(qkv, 3)?.try_into().expect("three chunks");
        let a = p.get(&self.scale_path())?;
        let (attended, map) = attention(tape, q, k, v, a)?;
        let projected = self.b2_out.forward(tape, p, attended)?;
        Ok((tape.add(projected, y)?, map))
    }

    pub fn forward_parts<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, y: Var) -> Result<DafmParts> {
        let conv = self.branch1(tape, p, y)?;
        let (att, attn_map) = self.branch2(tape, p, y)?;
        let out = tape.add(conv, att)?;
        Ok(DafmParts { conv, att, attn_map, out })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, y: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, p, y)?.out)
    }

    /// Records costs for an `h × w` input. The two attention products count
    /// `4·C²·HW` FLOPs; the scale counts as one parameter.
    pub fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<()> {
        for c in self.convs() {
            c.cost(h, w, report)?;
        }
        report.push(format!("{}.attention", self.prefix), attention_cost(self.cfg.channels, h * w));
        report.push(self.scale_path(), Cost { params: 1, flops: 0 });
        Ok(())
    }
}

pub fn attention_cost(channels: usize, pixels: usize) -> Cost {
    Cost { params: 0, flops: 4 * (channels * channels * pixels) as u64 }
}

/// `V · softmax(K Q / |a|)` on `[N, C, H, W]` tensors; returns the attended
/// features in NCHW layout and the `[N, C, C]` attention map.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, a: Var) -> Result<(Var, Var)> {
    let dims = tape.dims(q).to_vec();
    if tape.dims(k) != dims.as_slice() || tape.dims(v) != dims.as_slice() {
        return Err(Error::shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            dims,
            tape.dims(k),
            tape.dims(v)
        )));
    }
    let [n, c, h, w] = dims[..] else {
        return Err(Error::shape(format!("attention expects N,C,H,W tensors, got {dims:?}")));
    };
    let hw = h * w;
    let q3 = tape.reshape(q, &[n, c, hw])?;
    let q_t = tape.transpose(q3)?; // [N, HW, C]
    let k3 = tape.reshape(k, &[n, c, hw])?; // [N, C, HW]
    let logits = tape.matmul(k3, q_t)?; // [N, C, C]
    let scale = tape.abs(a);
    let logits = tape.div_scalar(logits, scale)?;
    let map = tape.softmax(logits, 2)?;
    let v3 = tape.reshape(v, &[n, c, hw])?;
    let v_t = tape.transpose(v3)?; // [N, HW, C]
    let out = tape.matmul(v_t, map)?; // [N, HW, C]
    let out = tape.transpose(out)?;
    Ok((tape.reshape(out, &[n, c, h, w])?, map))
}

/// Stores that reduce the branch chain to its residual: every conv and bias
/// zero. `F_conv = 0` and `F_att = Y`, so the module returns its input.
pub fn residual_only(module: &Dafm, store: &mut WeightStore) {
    for c in module.convs() {
        store.zero_prefix(&format!("{}.", c.path));
    }
}

/// Sets every branch-1 conv to its channel-identity kernel with zero bias.
pub fn identity_branch1(module: &Dafm, store: &mut WeightStore) -> Result<()> {
    let convs = std::iter::once(&module.b1_pw1).chain(&module.b1_group_dw).chain([&module.b1_conv3]);
    for c in convs {
        store.set(&c.weight_path(), nn::identity_weight(&c.spec)?)?;
        store.zero_prefix(&c.bias_path());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::shuffle_position;
    use crate::rng::rand_uniform;

    fn setup(cfg: DafmConfig, seed: u64) -> (Dafm, WeightStore) {
        let m = Dafm::new("dafm", cfg).unwrap();
        let mut store = WeightStore::new();
        m.init(&mut store, &mut Rng::new(seed)).unwrap();
        (m, store)
    }

    #[test]
    fn identity_branch1_is_the_shuffle() {
        let (m, mut store) = setup(DafmConfig::new(8).with_shuffle_groups(2).with_conv_groups(2), 1);
        identity_branch1(&m, &mut store).unwrap();
        let y = rand_uniform(&mut Rng::new(2), &[1, 8, 4, 5], -1.0, 1.0).unwrap();
        let mut t = Tape::<f32>::new();
        let p = t.bind(&store);
        let yv = t.leaf(y.clone());
        let out = m.branch1(&mut t, &p, yv).unwrap();
        let out = t.value(out);
        let hw = 20;
        for c in 0..8 {
            let dst = shuffle_position(c, 8, 2);
            assert_eq!(&out.data()[dst * hw..][..hw], &y.data()[c * hw..][..hw]);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let (m, mut store) = setup(DafmConfig::new(8), 3);
        for c in m.convs() {
            store.zero_prefix(&c.bias_path());
        }
        let mut t = Tape::<f32>::new();
        let p = t.bind(&store);
        let y = t.leaf(Tensor::zeros(&[2, 8, 3, 3]).unwrap());
        let out = m.branch1(&mut t, &p, y).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_survives_zeroed_weights() {
        let (m, mut store) = setup(DafmConfig::new(8), 4);
        residual_only(&m, &mut store);
        let y = rand_uniform(&mut Rng::new(5), &[1, 8, 5, 4], -2.0, 2.0).unwrap();
        let mut t = Tape::<f32>::new();
        let p = t.bind(&store);
        let yv = t.leaf(y.clone());
        let out = m.forward(&mut t, &p, yv).unwrap();
        assert!(t.value(out).bit_eq(&y));
    }

    #[test]
    fn rejects_bad_groups_and_channels() {
        assert!(Dafm::new("d", DafmConfig::new(6)).is_err());
        let (m, store) = setup(DafmConfig::new(8), 1);
        let mut t = Tape::<f32>::new();
        let p = t.bind(&store);
        let y = t.leaf(Tensor::zeros(&[1, 4, 3, 3]).unwrap());
        assert!(m.forward(&mut t, &p, y).is_err());
    }

    #[test]
    fn from_store_recovers_config() {
        let cfg = DafmConfig::new(16).with_shuffle_groups(2).with_conv_groups(4);
        let (m, store) = setup(cfg, 9);
        let back = Dafm::from_store("dafm", &store).unwrap();
        assert_eq!(back.cfg.scale_init(), 4.0);
        assert_eq!((back.cfg.shuffle_groups, back.cfg.conv_groups), (2, 4));
        assert_eq!(back.convs().collect::<Vec<_>>(), m.convs().collect::<Vec<_>>());
    }

    #[test]
    fn attention_cost_is_quadratic_in_channels_linear_in_pixels() {
        assert_eq!(attention_cost(8, 200).flops, 2 * attention_cost(8, 100).flops);
        assert_eq!(attention_cost(16, 100).flops, 4 * attention_cost(8, 100).flops);
    }
}
