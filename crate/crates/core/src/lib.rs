//! Core numerics for bidirectional selective state-space sleep staging.
//!
//! Everything here is `no_std` (with `alloc`): a small dense tensor with a
//! reverse-mode tape, zero-order-hold state-space layers, efficient channel
//! attention, the stage/health classifiers, Adam training with subject-wise
//! folds, confusion-matrix metrics and the signal utilities (resampling,
//! epoch slicing, synthetic polysomnography).
//!
//! File formats, dataset manifests and the command-line tool live in the
//! `bimamba` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bimamba;
pub mod data;
pub mod eca;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
