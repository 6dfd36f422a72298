//! Numeric core of the digitsv toolkit.
//!
//! Everything that computes lives here: a reverse-mode tape over flat f64
//! tensors, the layers and optimizer built on it, the synthetic digit-string
//! corpus and its MFCC front end, attentive pooling at one and two time
//! scales, the speaker and text encoders with their losses, embedding fusion,
//! and the EER / minDCF scoring metrics. The crate is `no_std` + `alloc`; IO,
//! file formats and the command line live in the companion `digitsv` crate.
//!
//! Determinism contract: every seeded entry point produces bit-identical
//! output for identical inputs and seed. All randomness flows through
//! [`rng::Prng`] streams derived from a caller-supplied master seed, and all
//! floating-point reductions run in a fixed order.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod pooling;
pub mod rng;
pub mod speaker;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
