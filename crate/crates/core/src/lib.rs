//! Diffusion-based class-agnostic image segmentation over analog bits.
//!
//! Everything in this crate is pure computation: label codecs, the
//! location-aware palette, the variance-preserving noise schedule, the
//! denoising network with hand-written backprop, the sampler, training
//! steps, evaluation metrics and a synthetic scene generator. File formats,
//! checkpoints and the command line live in the `diffseg` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bitcodec;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod label;
pub mod metrics;
pub mod nn;
pub mod palette;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use label::LabelMap;
pub use tensor::Tensor;
