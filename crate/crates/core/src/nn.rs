//! Layer specs, their cost model, and parameterized conv / linear layers.

use crate::cost::{Cost, CostReport};
use crate::error::{Error, Result};
use crate::kernels::{conv_out_size, ConvGeom};
use crate::rng::{rand_uniform, Rng};
use crate::store::WeightStore;
use crate::tape::{Params, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    None,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Silu => tape.silu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl ConvSpec {
    /// Square `k×k` conv, stride 1, "same" zero padding, bias, no activation.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::rect(in_channels, out_channels, k, k)
    }

    /// `kh×kw` conv with padding `(kh/2, kw/2)`.
    pub fn rect(in_channels: usize, out_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kh,
            kernel_w: kw,
            stride: 1,
            pad_h: kh / 2,
            pad_w: kw / 2,
            groups: 1,
            has_bias: true,
            activation: Activation::None,
        }
    }

    /// Depthwise `kh×kw` conv over `channels`.
    pub fn depthwise(channels: usize, kh: usize, kw: usize) -> Self {
        Self::rect(channels, channels, kh, kw).with_groups(channels)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride, self.groups];
        if pos.contains(&0) {
            return Err(Error::config(format!("conv spec has a zero size: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel_h, self.kernel_w]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel_h * self.kernel_w
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom { stride: self.stride, pad_h: self.pad_h, pad_w: self.pad_w, groups: self.groups }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_size(h, self.kernel_h, self.pad_h, self.stride)?,
            conv_out_size(w, self.kernel_w, self.pad_w, self.stride)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub has_bias: bool,
}

impl LinearSpec {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self { in_features, out_features, has_bias: true }
    }

    pub fn weight_dims(&self) -> [usize; 2] {
        [self.out_features, self.in_features]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Linear(LinearSpec),
}

impl From<ConvSpec> for LayerSpec {
    fn from(s: ConvSpec) -> Self {
        LayerSpec::Conv(s)
    }
}

impl From<LinearSpec> for LayerSpec {
    fn from(s: LinearSpec) -> Self {
        LayerSpec::Linear(s)
    }
}

/// Parameter count and FLOPs (2 per multiply-add, 1 per bias add) of one
/// layer producing an `out_h × out_w` map for a single batch item. Linear
/// layers use `out_h = out_w = 1`.
pub fn cost_of(spec: impl Into<LayerSpec>, out_h: usize, out_w: usize) -> Cost {
    match spec.into() {
        LayerSpec::Conv(s) => {
            let weights = (s.out_channels * (s.in_channels / s.groups) * s.kernel_h * s.kernel_w) as u64;
            let pixels = (out_h * out_w) as u64;
            let bias = if s.has_bias { s.out_channels as u64 } else { 0 };
            Cost { params: weights + bias, flops: 2 * weights * pixels + bias * pixels }
        }
        LayerSpec::Linear(s) => {
            let weights = (s.in_features * s.out_features) as u64;
            let bias = if s.has_bias { s.out_features as u64 } else { 0 };
            Cost { params: weights + bias, flops: 2 * weights + bias }
        }
    }
}

/// Uniform `[-s, s)` draws with `s = sqrt(1 / fan_in)`.
fn init_uniform(rng: &mut Rng, dims: &[usize], fan_in: usize) -> Result<Tensor> {
    let s = (1.0 / fan_in as f64).sqrt() as f32;
    rand_uniform(rng, dims, -s, s)
}

/// A convolution whose weights live at `{path}.weight` / `{path}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub path: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(path: impl Into<String>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { path: path.into(), spec })
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        let fan_in = self.spec.fan_in();
        store.insert(self.weight_path(), init_uniform(rng, &self.spec.weight_dims(), fan_in)?)?;
        if self.spec.has_bias {
            store.insert(self.bias_path(), init_uniform(rng, &[self.spec.out_channels], fan_in)?)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        let c = tape.dims(x).get(1).copied().unwrap_or(0);
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "{}: channel mismatch, input has {c} channels, expected {}",
                self.path, self.spec.in_channels
            )));
        }
        let w = p.get(&self.weight_path())?;
        let b = if self.spec.has_bias { Some(p.get(&self.bias_path())?) } else { None };
        let y = tape.conv2d(x, w, b, self.spec.geom())?;
        Ok(self.spec.activation.apply(tape, y))
    }

    /// Confirms `store` holds this layer's tensors with the expected dims.
    pub fn check_store(&self, store: &WeightStore) -> Result<()> {
        check_dims(store, &self.weight_path(), &self.spec.weight_dims())?;
        if self.spec.has_bias {
            check_dims(store, &self.bias_path(), &[self.spec.out_channels])?;
        }
        Ok(())
    }

    /// Records this layer's cost for an `h × w` input and returns the output size.
    pub fn cost(&self, h: usize, w: usize, report: &mut CostReport) -> Result<(usize, usize)> {
        let (oh, ow) = self.spec.out_hw(h, w)?;
        report.push(&self.path, cost_of(self.spec, oh, ow));
        Ok((oh, ow))
    }
}

/// A fully connected layer with weights at `{path}.weight` / `{path}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub path: String,
    pub spec: LinearSpec,
}

impl Linear {
    pub fn new(path: impl Into<String>, spec: LinearSpec) -> Result<Self> {
        if spec.in_features == 0 || spec.out_features == 0 {
            return Err(Error::config(format!("linear spec has a zero size: {spec:?}")));
        }
        Ok(Self { path: path.into(), spec })
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    pub fn init(&self, store: &mut WeightStore, rng: &mut Rng) -> Result<()> {
        let fan_in = self.spec.in_features;
        store.insert(self.weight_path(), init_uniform(rng, &self.spec.weight_dims(), fan_in)?)?;
        if self.spec.has_bias {
            store.insert(self.bias_path(), init_uniform(rng, &[self.spec.out_features], fan_in)?)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Params, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_path())?;
        let b = if self.spec.has_bias { Some(p.get(&self.bias_path())?) } else { None };
        tape.linear(x, w, b)
    }

    pub fn check_store(&self, store: &WeightStore) -> Result<()> {
        check_dims(store, &self.weight_path(), &self.spec.weight_dims())?;
        if self.spec.has_bias {
            check_dims(store, &self.bias_path(), &[self.spec.out_features])?;
        }
        Ok(())
    }

    pub fn cost(&self, report: &mut CostReport) {
        report.push(&self.path, cost_of(self.spec, 1, 1));
    }
}

/// Channel-identity kernel for a conv with `in == out` channels: a single 1.0
/// at the centre tap linking each output channel to its own input channel.
pub fn identity_weight(spec: &ConvSpec) -> Result<Tensor> {
    if spec.in_channels != spec.out_channels {
        return Err(Error::config(format!(
            "identity kernel needs in == out channels, got {}->{}",
            spec.in_channels, spec.out_channels
        )));
    }
    let [o, cig, kh, kw] = spec.weight_dims();
    let mut w = Tensor::zeros(&[o, cig, kh, kw])?;
    for oc in 0..o {
        let local = oc % cig;
        w.data_mut()[((oc * cig + local) * kh + kh / 2) * kw + kw / 2] = 1.0;
    }
    Ok(w)
}

pub(crate) fn check_dims(store: &WeightStore, path: &str, dims: &[usize]) -> Result<()> {
    let t = store.require(path)?;
    if t.dims() != dims {
        return Err(Error::Format { field: path.to_string(), msg: format!("dims {:?}, expected {dims:?}", t.dims()) });
    }
    Ok(())
}

/// Input-channel count recorded in a stored conv weight.
pub(crate) fn stored_conv_dims(store: &WeightStore, path: &str) -> Result<[usize; 4]> {
    let t = store.require(&format!("{path}.weight"))?;
    match *t.dims() {
        [o, i, kh, kw] => Ok([o, i, kh, kw]),
        _ => Err(Error::Format { field: format!("{path}.weight"), msg: format!("expected rank 4, got {:?}", t.dims()) }),
    }
}

pub(crate) fn linear_from_store(store: &WeightStore, path: &str) -> Result<Linear> {
    let t = store.require(&format!("{path}.weight"))?;
    let [o, i] = match *t.dims() {
        [o, i] => [o, i],
        _ => {
            return Err(Error::Format {
                field: format!("{path}.weight"),
                msg: format!("expected rank 2, got {:?}", t.dims()),
            })
        }
    };
    let mut spec = LinearSpec::new(i, o);
    spec.has_bias = store.contains(&format!("{path}.bias"));
    Linear::new(path, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_examples() {
        assert_eq!(cost_of(ConvSpec::new(16, 32, 3), 1, 1).params, 4640);
        let c = cost_of(ConvSpec::new(64, 64, 1).without_bias(), 20, 20);
        assert_eq!(c.flops, 3_276_800);
        assert_eq!(cost_of(ConvSpec::depthwise(64, 3, 3).without_bias(), 1, 1).params, 576);
        assert_eq!(cost_of(ConvSpec::depthwise(64, 3, 3), 1, 1).params, 640);
        let l = cost_of(LinearSpec::new(8, 2), 1, 1);
        assert_eq!(l, Cost { params: 18, flops: 34 });
    }

    #[test]
    fn spec_validation() {
        assert!(ConvSpec::new(6, 4, 3).with_groups(4).validate().is_err());
        assert!(ConvSpec::depthwise(8, 3, 3).is_depthwise());
        assert!(ConvSpec::new(0, 4, 3).validate().is_err());
    }

    #[test]
    fn init_bounded_by_fan_in() {
        let conv = Conv::new("c", ConvSpec::new(4, 2, 3)).unwrap();
        let mut store = WeightStore::new();
        conv.init(&mut store, &mut Rng::new(5)).unwrap();
        let s = (1.0f32 / 36.0).sqrt();
        let w = store.get("c.weight").unwrap();
        assert_eq!(w.dims(), &[2, 4, 3, 3]);
        assert!(w.data().iter().all(|v| v.abs() <= s));
        assert_eq!(store.get("c.bias").unwrap().dims(), &[2]);
    }
}
