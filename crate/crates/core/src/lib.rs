//! Calibration-only adaptive bit-width quantization for super-resolution
//! networks.
//!
//! A frozen floating-point SR network is turned into a fake-quantized one
//! whose activation bit-widths adapt per image (from image complexity) and
//! per layer (from activation statistics). Only calibration LR images are
//! needed: no ground-truth HR images and no weight updates.

pub mod autograd;
pub mod bitmapping;
pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod quantizer;
pub mod srnet;
pub mod tensor;

pub use autograd::{GradTape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
