//! Convolutional kernel bypass grafting (CKBG) for online video super-resolution.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`ops`] / [`autodiff`]: a small dense NCHW tensor engine with
//!   reverse-mode gradients for exactly the operators the network uses.
//! * [`transport`]: exact 2-Wasserstein distances on small discrete supports,
//!   entropic fixed-support barycenters, and the signed-measure extension used
//!   for convolution kernels.
//! * [`kernel_prior`]: kernel banks, Wasserstein K-Means, PCA bases,
//!   significance sampling and graft construction.
//! * [`reparam`]: merging sequential and parallel convolutions into one.
//! * [`vsr_net`]: the recurrent online VSR network in train and deploy form.
//! * [`train_eval`]: loss, optimiser, schedules, synthetic data, metrics,
//!   complexity counters and latency reports.

pub mod autodiff;
pub mod error;
pub mod format;
pub mod kernel_prior;
pub mod ops;
pub mod reparam;
pub mod tensor;
pub mod train_eval;
pub mod transport;
pub mod vsr_net;

pub use error::{Error, Result};
pub use tensor::{ConvParams, FlowField, Precision, Real, Tensor4};
