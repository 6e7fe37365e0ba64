//! Deterministic SplitMix64 generator.
//!
//! Update rule, bit-exact:
//!
//! ```text
//! state = state + 0x9E3779B97F4A7C15            (wrapping)
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (wrapping)
//! output = z ^ (z >> 31)
//! ```
//!
//! A uniform `f32` draw takes the top 24 bits of one output, `u = (x >> 40) / 2^24`,
//! and maps it to `lo + (hi - lo) * u` evaluated in `f64` then rounded to `f32`.
//! A result that rounds up to `hi` is replaced by the next float below `hi`.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 40) as f64 * (1.0 / (1u64 << 24) as f64)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let v = (lo as f64 + (hi as f64 - lo as f64) * self.next_unit()) as f32;
        if v >= hi {
            hi.next_down()
        } else {
            v
        }
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_unit() * n as f64) as usize % n.max(1)
    }
}

/// Fills a fresh tensor of `dims` with uniform draws in `[lo, hi)`, advancing
/// the stream by exactly `product(dims)` outputs.
pub fn rand_uniform(rng: &mut Rng, dims: &[usize], lo: f32, hi: f32) -> Result<Tensor> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::EmptyTensor);
    }
    if !(lo < hi) {
        return Err(Error::config(format!("rand_uniform needs lo < hi, got [{lo}, {hi})")));
    }
    let data = (0..numel(dims)).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(dims, data)
}
