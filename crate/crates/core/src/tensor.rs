//! Dense rank-≤4 tensors and the `.tns` interchange format.
//!
//! A `.tns` file is the 4-byte magic `TNSR`, a little-endian `u32` rank,
//! `rank` little-endian `u32` dims, then `product(dims)` little-endian `f32`
//! values in row-major order. Nothing follows the payload.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

pub const TNS_MAGIC: &[u8; 4] = b"TNSR";
pub const MAX_RANK: usize = 4;

/// Element type of a tensor. Production runs use `f32`; gradient checks use `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(format!("rank {} outside 1..={MAX_RANK}", dims.len())));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::EmptyTensor);
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        if numel(dims) != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {} values, got {}",
                numel(dims),
                data.len()
            )));
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self { dims: dims.to_vec(), data: vec![value; numel(dims)] })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    /// Internal constructor for kernels whose output dims are already validated.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Dims of a rank-4 tensor as `(n, c, h, w)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected N,C,H,W tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        if numel(dims) != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        Ok(Self { dims: dims.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; errors on dims mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("dims {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, |m, d| if m.is_nan() || d.is_nan() { f64::NAN } else { m.max(d) }))
    }

    /// Sum in index order with Neumaier compensation, so the rounding error
    /// does not grow with the element count.
    pub fn sum(&self) -> T {
        let (mut s, mut c) = (T::zero(), T::zero());
        for &v in &self.data {
            let t = s + v;
            c = c + if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
            s = t;
        }
        s + c
    }
}

impl Tensor<f32> {
    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over the `.tns` encoding; a stable fingerprint for reports.
    pub fn checksum(&self) -> u64 {
        let mut buf = Vec::with_capacity(8 + 4 * self.len());
        self.write_tns(&mut buf).expect("writing to a Vec cannot fail");
        buf.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    pub fn write_tns(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TNS_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_tns_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.rank() + 4 * self.len());
        self.write_tns(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes exactly one tensor from the start of `bytes`, returning it
    /// together with the number of bytes consumed.
    pub fn decode_tns(bytes: &[u8]) -> Result<(Self, usize)> {
        let fe = |field: &str, msg: String| Error::Format { field: field.to_string(), msg };
        if bytes.len() < 4 {
            return Err(fe("magic", "file shorter than magic bytes".into()));
        }
        if &bytes[..4] != TNS_MAGIC {
            return Err(fe("magic", format!("expected \"TNSR\", found {:?}", &bytes[..4])));
        }
        let u32_at = |off: usize| -> Option<u32> {
            bytes.get(off..off + 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let rank = u32_at(4).ok_or_else(|| fe("rank", "missing rank".into()))? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(fe("rank", format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let d = u32_at(8 + 4 * i).ok_or_else(|| fe("dims", format!("missing dim {i} of {rank}")))?;
            if d == 0 {
                return Err(fe("dims", format!("dim {i} is zero")));
            }
            dims.push(d as usize);
        }
        let start = 8 + 4 * rank;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let need = count
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| fe("dims", format!("dims {dims:?} overflow")))?;
        let payload = &bytes[start..];
        if payload.len() < need {
            return Err(fe(
                "payload",
                format!("payload shorter than header dims ({} bytes, need {need})", payload.len()),
            ));
        }
        let data = payload[..need]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok((Self { dims, data }, start + need))
    }

    /// Decodes a whole `.tns` buffer; trailing bytes are rejected.
    pub fn from_tns_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_tns(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format {
                field: "payload".into(),
                msg: format!("{} trailing bytes after payload", bytes.len() - used),
            });
        }
        Ok(t)
    }

    pub fn read_tns(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_tns_bytes(&bytes)
    }

    pub fn save_tns(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tns_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(Error::EmptyTensor)));
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn tns_layout_is_fixed() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
        let bytes = t.to_tns_bytes();
        let mut expect = b"TNSR".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncated_payload_is_named() {
        let t = Tensor::new(&[1, 2, 2, 2], vec![0.5f32; 8]).unwrap();
        let bytes = t.to_tns_bytes();
        let err = Tensor::from_tns_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload shorter than header dims"), "{err}");
        let err = Tensor::from_tns_bytes(b"TNSX\x01\0\0\0").unwrap_err();
        assert!(err.to_string().contains("magic"));
        let err = Tensor::from_tns_bytes(b"TNSR\x09\0\0\0").unwrap_err();
        assert!(err.to_string().contains("rank"));
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let a = Tensor::new(&[1], vec![0.0f32]).unwrap();
        let b = Tensor::new(&[1], vec![-0.0f32]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn max_abs_diff_keeps_nan() {
        let a = Tensor::new(&[3], vec![f32::NAN, 0.0, 5.0]).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        assert!(a.max_abs_diff(&b).unwrap().is_nan());
        assert_eq!(b.max_abs_diff(&b).unwrap(), 0.0);
    }
}
