//! bisr-core: a 1-bit diffusion super-resolution engine.
//!
//! The crate implements the full stack: a dense NCHW tensor core with a
//! reverse-mode tape, packed 1-bit XNOR-popcount convolution kernels, the
//! binarization-friendly UNet (consistent-pixel down/upsampling,
//! channel-shuffle fusion, timestep-aware bias/activation banks), a DDIM
//! sampler conditioned on bicubically upscaled low-resolution images, an L1 +
//! Adam training harness, Y-channel PSNR/SSIM metrics, a params/ops cost
//! accountant, and a bit-exact checkpoint container.

pub mod bits;
pub mod blocks;
pub mod ckpt;
pub mod cost;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod imageio;
pub mod kernels;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Dims, Tensor4};
