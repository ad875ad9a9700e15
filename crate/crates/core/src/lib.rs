//! Instance-dependent label-noise learning with a dual-branch causal
//! variational autoencoder.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation:
//! dataset construction, noise synthesis, the small neural-network engine,
//! the model and its losses, and the training loops. File formats, the CLI
//! and experiment orchestration live in the `causalnl` companion crate.
//!
//! The `std` feature (on by default) only enables runtime SIMD dispatch in
//! the matrix-multiply kernel.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod datasets;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
