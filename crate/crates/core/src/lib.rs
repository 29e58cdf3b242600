//! Progressive 2D Gaussian splatting codec.
//!
//! Frames are represented as layered sets of 2D Gaussian splats. The base
//! layer renders a coarse but complete frame on its own, and every
//! enhancement layer adds detail on top of the layers below it. Layers are
//! optimized jointly with a cyclic schedule, quantized, and written to a
//! container that can be cut after any layer without re-encoding.
//!
//! The crate is organized bottom-up:
//!
//! * [`splat`]: splat and layered-frame types, covariance helpers, checkpoints
//! * [`raster`]: tiled forward renderer and its analytic backward pass
//! * [`optim`]: L2 loss, Adan/Adam updates and the learning-rate schedule
//! * [`train`]: key-frame selection, layered initialization, joint training
//!   and the comparison baselines
//! * [`quant`]: asymmetric scalar quantization, reduced floats, residual VQ
//!   and quantization-aware fine-tuning
//! * [`bitstream`]: the layer-major `.pgsv` container
//! * [`metrics`]: PSNR, MS-SSIM and rate-distortion tables
//! * [`io`]: PNG / raw YUV ingestion and export, resampling

// `!(x > 0.0)` is used on purpose so that NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Per-channel loops index several parallel arrays at once.
#![allow(clippy::needless_range_loop)]

pub mod bitstream;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod quant;
pub mod raster;
pub mod splat;
pub mod train;

mod par;
mod wire;

pub use error::{Error, Result};
pub use par::Exec;
pub use raster::RasterImage;
pub use splat::{CodecConfig, FrameKind, GaussianVideo, LayeredFrame, Splat};
