//! Wavelet-domain denoising diffusion.
//!
//! Images are moved into a `[B, C, 4, H/2, W/2]` Haar subband layout, a
//! U-Net built from (2+1)D spatial-frequency convolutions and separable
//! spatial/frequency attention predicts the injected noise, and samples are
//! drawn by reverse diffusion in wavelet space followed by one inverse
//! transform.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training and
//! sampling, `f64` for gradient checks); the aliases below fix the common
//! instantiations.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod sample;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod wavelet;

pub use autodiff::{Graph, Var};
pub use diffusion::{NoiseSchedule, SigmaMode};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{Model, ModelConfig, Variant};
pub use wavelet::WaveletStack;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type WaveletStack32 = WaveletStack<f32>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
