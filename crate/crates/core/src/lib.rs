//! Compression of convolution layers by CP-decomposition of their kernels.
//!
//! The pipeline: decompose a `d × d × S × T` kernel into four factor matrices
//! ([`cp`], [`rewrite::decompose_kernel`]), replace the layer with four small
//! convolutions ([`rewrite`]), fine-tune the whole network ([`nn`]) and
//! measure error, accuracy, speed and size ([`bench`]).

pub mod bench;
pub mod cp;
pub mod data;
pub mod error;
pub mod io;
mod linalg;
pub mod nn;
pub mod parallel;
pub mod random;
pub mod rewrite;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, FactorMatrix};
