//! Self-supervised volumetric denoising with an invertible coupling network.
//!
//! The library trains a denoiser without clean targets: each noisy slice of a
//! volume is mapped to the average of its two axial neighbors (a second noisy
//! view of the same anatomy), while the network's exact inverse maps the
//! prediction back to the input slice. The invertible core guarantees
//! cycle-consistency by construction, before any training.
//!
//! Modules mirror the pipeline:
//! - [`tensor`]: minimal reverse-mode autodiff over dense N-d arrays.
//! - [`model`]: coupling blocks, the invertible core, encoders/decoders and
//!   the ablation baselines.
//! - [`volume`]: volume I/O, synthetic phantoms, noise models and
//!   neighbor-average training pairs.
//! - [`train`]: losses, Adam, the training loop and whole-volume inference.
//! - [`metrics`]: PSNR/SSIM and report emission.
//! - [`cli`]: the batch command-line surface.
//!
//! Runnable walk-throughs for each capability live under `examples/`.

#[cfg(feature = "fast-alloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
