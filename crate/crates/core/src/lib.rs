//! Multi-garment reference-attention diffusion, from the tensor up.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a small reverse-mode autodiff tape, the denoiser UNet, the
//! three reference-fusion mechanisms, the garment encoder, noise schedules,
//! samplers and the training loop, the procedural garment-triplet generator
//! and the evaluation metrics. File formats, configuration and the command
//! line live in the `garmentfuse` companion crate.

#![cfg_attr(not(test), no_std)]
// `!(x >= 0.0)` is the NaN-rejecting form used by validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod checkpoint;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
