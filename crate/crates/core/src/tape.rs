//! Reverse-mode differentiation over the primitive op set.
//!
//! Every op appends one node holding its output value and the ids of its
//! inputs. Nodes are only ever appended, so inputs always precede the node
//! that consumes them and [`Tape::backward`] can walk the node list once in
//! reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::store::WeightStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Softmax { x: Var, axis: usize },
    GlobalAvgPool { x: Var },
    ChannelShuffle { x: Var, groups: usize },
    Concat { parts: Vec<Var> },
    Narrow { x: Var, start: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulBroadcast { x: Var, s: Var },
    DivScalar { x: Var, s: Var },
    Abs { x: Var },
    Scale { x: Var, factor: f64 },
    Silu { x: Var },
    Sigmoid { x: Var },
    Upsample2x { x: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Sum { x: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Parameter leaves bound from a [`WeightStore`], looked up by path.
#[derive(Clone, Debug, Default)]
pub struct Params {
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl Params {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::MissingWeight(path.to_string()))
    }

    pub fn opt(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    pub fn insert(&mut self, path: impl Into<String>, var: Var) {
        let path = path.into();
        if self.vars.insert(path.clone(), var).is_none() {
            self.order.push(path);
        }
    }

    /// Paths in binding order.
    pub fn paths(&self) -> &[String] {
        &self.order
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.order.iter().map(|p| (p.as_str(), self.vars[p]))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), flops: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes.get(v.0), Some(Node { op: Op::Leaf, .. }))
    }

    /// Fingerprint of every piecewise choice on the tape: max-pool winners and
    /// the sign of each `abs` input. Two evaluations with equal fingerprints
    /// lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                Op::Abs { x } => self.nodes[x.0].value.data().iter().for_each(|v| mix((v.as_f64() < 0.0) as u64)),
                _ => {}
            }
        }
        h
    }

    /// Floating-point operations executed by conv, linear and matmul nodes so
    /// far, at 2 per multiply-add plus one per bias add.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records every tensor of `store` as a leaf.
    pub fn bind(&mut self, store: &WeightStore) -> Params {
        let mut params = Params::default();
        for (path, t) in store.iter() {
            let v = self.leaf(t.cast());
            params.insert(path, v);
        }
        params
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let wd = self.dims(w);
        let macs = (out.len() * wd[1] * wd[2] * wd[3]) as u64;
        self.flops += 2 * macs + if b.is_some() { out.len() as u64 } else { 0 };
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let macs = (out.len() * self.dims(w)[1]) as u64;
        self.flops += 2 * macs + if b.is_some() { out.len() as u64 } else { 0 };
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let k = self.dims(a)[self.dims(a).len() - 1];
        self.flops += 2 * (out.len() * k) as u64;
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(x))?;
        Ok(self.push(out, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(dims)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let out = kernels::channel_shuffle(self.value(x), groups)?;
        Ok(self.push(out, Op::ChannelShuffle { x, groups }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(out, Op::Narrow { x, start }))
    }

    /// Splits axis 1 into `parts` equal chunks.
    pub fn chunk(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.dims(x)[1];
        if parts == 0 || c % parts != 0 {
            return Err(Error::shape(format!("cannot split {c} channels into {parts} equal parts")));
        }
        let len = c / parts;
        (0..parts).map(|i| self.narrow(x, i * len, len)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_with(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_with(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// `x: [N, C, H, W]` times `s: [N, C]` or `[N, 1]`, broadcast over space.
    pub fn mul_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = kernels::mul_broadcast(self.value(x), self.value(s))?;
        Ok(self.push(out, Op::MulBroadcast { x, s }))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape(format!("divisor must have one element, got {:?}", sv.dims())));
        }
        let d = sv.data()[0];
        let out = self.value(x).map(|v| v / d);
        Ok(self.push(out, Op::DivScalar { x, s }))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of_f64(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * kernels::sigmoid_scalar(v));
        self.push(out, Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid_scalar);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2x(self.value(x))?;
        Ok(self.push(out, Op::Upsample2x { x }))
    }

    pub fn maxpool(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_same(self.value(x), kernel)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Adjoints of the scalar `loss` with respect to every node that feeds it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.nodes.get(loss.0).ok_or(Error::NotOnTape(loss.0))?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(node.value.dims(), T::one())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let Node { value: y, op } = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), &g, *geom)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(val(*x), val(*w), &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let da = kernels::matmul(&g, &kernels::transpose(bv)?)?;
                    let db = kernels::matmul(&kernels::transpose(av)?, &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose { x } => accumulate(&mut grads, *x, kernels::transpose(&g)?),
                Op::Reshape { x } => accumulate(&mut grads, *x, g.reshaped(val(*x).dims())?),
                Op::Softmax { x, axis } => {
                    accumulate(&mut grads, *x, kernels::softmax_backward(y, &g, *axis)?);
                }
                Op::GlobalAvgPool { x } => {
                    accumulate(&mut grads, *x, kernels::global_avg_pool_backward(val(*x).dims(), &g));
                }
                Op::ChannelShuffle { x, groups } => {
                    accumulate(&mut grads, *x, kernels::channel_unshuffle(&g, *groups)?);
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).dims()[1];
                        accumulate(&mut grads, *p, kernels::narrow_channels(&g, start, len)?);
                        start += len;
                    }
                }
                Op::Narrow { x, start } => {
                    accumulate(&mut grads, *x, kernels::narrow_channels_backward(val(*x).dims(), &g, *start));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul { a, b } => {
                    let da = kernels::zip_with(&g, val(*b), |gv, bv| gv * bv)?;
                    let db = kernels::zip_with(&g, val(*a), |gv, av| gv * av)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulBroadcast { x, s } => {
                    let (dx, ds) = kernels::mul_broadcast_backward(val(*x), val(*s), &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, ds);
                }
                Op::DivScalar { x, s } => {
                    let d = val(*s).data()[0];
                    accumulate(&mut grads, *x, g.map(|gv| gv / d));
                    let dot = g.data().iter().zip(val(*x).data()).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                    let ds = Tensor::full(val(*s).dims(), -dot / (d * d))?;
                    accumulate(&mut grads, *s, ds);
                }
                Op::Abs { x } => {
                    let dx = kernels::zip_with(&g, val(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale { x, factor } => {
                    let f = T::of_f64(*factor);
                    accumulate(&mut grads, *x, g.map(|gv| gv * f));
                }
                Op::Silu { x } => {
                    let dx = kernels::zip_with(&g, val(*x), |gv, xv| {
                        let s = kernels::sigmoid_scalar(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = kernels::zip_with(&g, y, |gv, yv| gv * yv * (T::one() - yv))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2x { x } => {
                    accumulate(&mut grads, *x, kernels::upsample2x_backward(val(*x).dims(), &g));
                }
                Op::MaxPool { x, argmax } => {
                    accumulate(&mut grads, *x, kernels::maxpool_backward(val(*x).dims(), argmax, &g));
                }
                Op::Sum { x } => {
                    accumulate(&mut grads, *x, Tensor::full(val(*x).dims(), g.data()[0])?);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, dims: &[usize], data: &[f64]) -> Var {
        tape.leaf(Tensor::new(dims, data.to_vec()).unwrap())
    }

    #[test]
    fn sum_adjoint_is_ones() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], &[1., -2., 3., 4., 5., 6.]);
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_adjoint_is_twice_x() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1., -2., 0.5]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., -4., 1.]);
    }

    #[test]
    fn softmax_sum_has_zero_adjoint() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, -0.2]);
        let s = t.softmax(x, 1).unwrap();
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1., 2.]);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(matches!(t.backward(Var(7)), Err(Error::NotOnTape(7))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[3., 4.]);
        let y = t.add(x, x).unwrap();
        let z = t.mul(y, x).unwrap();
        let loss = t.sum(z);
        // loss = 2 x^2, d/dx = 4x
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[12., 16.]);
    }

    #[test]
    fn flops_follow_convention() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::ones(&[1, 64, 20, 20]).unwrap());
        let w = t.leaf(Tensor::ones(&[64, 64, 1, 1]).unwrap());
        let geom = ConvGeom { stride: 1, pad_h: 0, pad_w: 0, groups: 1 };
        t.conv2d(x, w, None, geom).unwrap();
        assert_eq!(t.flops(), 3_276_800);
    }
}
