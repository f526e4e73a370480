//! Diffusion-based super-resolution for compressed video, at toy scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffusion`]: noise schedule, forward noising, DDPM/DDIM steps;
//! * [`degrade`] and [`resize`]: the low-quality input generator (bicubic
//!   decimation plus a blockwise DCT codec stand-in);
//! * [`nn`], [`conv`], [`vae`], [`unet`]: the latent autoencoder and the controlled
//!   denoiser;
//! * [`dcm`], [`capm`], [`recon`]: the distortion-control pre-cleaner, the
//!   compression-aware prompts, and the temporal decoder / fusion / color
//!   correction stages;
//! * [`flow`], [`warp`], [`guidance`]: optical flow and the motion-error
//!   corrected sampling step;
//! * [`metrics`]: PSNR/SSIM on luma, warping error, variance-weighted pixel
//!   loss and temporal profiles;
//! * [`config`], [`dataset`], [`model`], [`checkpoint`], [`train`],
//!   [`pipeline`]: orchestration.

pub mod capm;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod dcm;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod frame;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod recon;
pub mod resize;
pub mod rng;
pub mod train;
pub mod unet;
pub mod vae;
pub mod warp;

pub use config::{PipelineConfig, Variants};
pub use dataset::{Dataset, SyntheticDatasetSpec};
pub use degrade::DegradationSpec;
pub use diffusion::{NoiseSchedule, SamplerMode, StepIndex};
pub use error::{Error, Result};
pub use frame::{Frame, VideoClip};
pub use metrics::MetricReport;
pub use model::{Model, Stage};
pub use pipeline::Pipeline;
