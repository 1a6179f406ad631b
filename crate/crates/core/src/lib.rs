//! Rectifier-modulated diffusion reconstruction and editing on a toy image domain.
//!
//! A hypernetwork (the rectifier) looks at the original image and the current
//! clean-image estimate of a frozen noise predictor and emits separable,
//! multiplicative offsets for the predictor's middle and up-sampling
//! convolution kernels. The crate contains everything needed to train and
//! evaluate that setup from scratch: a small autodiff engine, the diffusion
//! kernel, the U-Net noise predictor, the rectifier, an analytic attribute
//! probe, a procedural dataset, trainers and an experiment harness.

pub mod autodiff;
pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod pgm;
pub mod probe;
pub mod rectifier;
pub mod toyset;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use denoiser::{DenoiserConfig, DenoiserParams};
pub use diffusion::{NoiseSchedule, TrajectoryRecord};
pub use error::{Error, Result};
pub use rectifier::{RectifierParams, SeparableOffset};
