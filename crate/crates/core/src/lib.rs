//! Latent video diffusion at desk scale.
//!
//! A keyframe denoiser built from shared 2-D convolutions, per-frame
//! adaptors and parallel spatial / directed temporal attention; a frame
//! interpolation model initialised from it; and a VAE whose video decoder
//! adds causal temporal attention. Everything runs on a small
//! reverse-mode autodiff engine over dense CPU tensors.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod vae;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{Binding, ParamSet};
pub use tensor::{Scalar, Tensor};
pub use schedule::{NoiseSchedule, PredictionTarget, Sampler, ScheduleConfig};
