//! Semi-supervised few-shot recognition with an auxiliary segmentation task.
//!
//! A shared convolutional extractor feeds both a segmentation decoder and a
//! classifier. Training alternates two half-steps per loop: the decoder learns
//! from masked samples, the classifier from class-labelled samples, and the
//! shared extractor receives each task's loss plus an annealed residue of the
//! other task's loss from the previous loop.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the default `f64` instantiation.

pub mod attention;
pub mod data;
pub mod error;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod seg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{BnMode, Shape};

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model = model::SfasModel<f64>;
pub type Model32 = model::SfasModel<f32>;
pub type Trainer = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;

/// Side length of every chip.
pub const CHIP: usize = 80;
/// Pixels per chip, the `n` of the per-pixel segmentation average.
pub const CHIP_PIXELS: usize = CHIP * CHIP;
