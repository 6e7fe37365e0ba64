//! DAONet-style detector operators on a small reverse-mode tape.

pub mod blocks;
pub mod checks;
pub mod cli;
pub mod cost;
pub mod dafm;
pub mod dsconv;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod oahead;
pub mod rng;
pub mod runner;
pub mod store;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
