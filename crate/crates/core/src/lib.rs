//! Numerical core of the `imse` speech enhancer.
//!
//! `no_std` with `alloc`: tensors, amplitude-aware linear attention, inception
//! depthwise convolution, the STFT frontend, the U-Net enhancer with
//! hand-written backward passes, and the toy training harness. File formats,
//! audio I/O and the command line live in the `imse` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod idconv;
pub mod mala;
pub mod model;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
