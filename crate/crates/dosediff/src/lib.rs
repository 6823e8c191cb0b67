//! Diffusion-based radiotherapy dose prediction with a selective
//! state-space (Mamba) denoising network.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode autodiff tape.
//! - [`ssm`]: state-space machinery — zero-order-hold discretization,
//!   linear-recurrence scan, the equivalent causal convolution kernel,
//!   and the input-dependent (selective) SSM layer.
//! - [`net`]: the denoising network — Mamba blocks, a token-based
//!   UNet with skip connections, and the structure encoder that fuses
//!   anatomy into the encoder stages.
//! - [`diffusion`]: variance-preserving noise schedule, forward
//!   corruption, the epsilon-prediction training loss, and the
//!   ancestral reverse sampler.
//! - [`phantom`]: synthetic thoracic phantom generator and the on-disk
//!   dataset format.
//! - [`metrics`]: dose score, DVH curves and summary metrics, and the
//!   homogeneity index.
//! - [`config`], [`optim`], [`checkpoint`], [`train`], [`commands`]:
//!   run configuration, Adam, checkpointing, the training loop, and
//!   the CLI entry points.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod phantom;
pub mod ssm;
pub mod tensor;
pub mod train;
pub(crate) mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
