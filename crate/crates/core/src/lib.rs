//! Diffusion-based augmentation of minority particle classes and an
//! imbalance-robust evaluation harness.
//!
//! The pipeline has two phases: train one unconditional denoising diffusion
//! model per minority class and sample synthetic images from it, then train
//! residual-network classifiers on real-only and real-plus-synthetic corpora
//! and compare them with per-class precision, macro precision and AUPRC.

pub mod autograd;
pub mod checkpoint;
pub mod classify;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod frechet;
pub mod imageio;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
