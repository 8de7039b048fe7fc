//! Robust selective fine-tuning (ROSE) on small multilayer perceptrons.
//!
//! A reverse-mode [`autograd::Tape`] computes gradients. [`rose`] turns
//! dropout-KL gradients and gradient/momentum divergence into per-unit
//! risks and masks, which [`optimizer`] applies inside AdamW. [`landscape`]
//! and [`probe`] measure flatness and reliance on spurious surface cues.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod landscape;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod params;
pub mod probe;
pub mod rng;
pub mod rose;
pub mod tensor;
pub mod train;

pub use error::{Result, RoseError};
pub use params::ParamSet;
pub use tensor::Tensor;
