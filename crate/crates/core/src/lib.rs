//! Balanced knowledge distillation for long-tailed classification.
//!
//! A teacher network is trained with plain cross-entropy; a student of the
//! same shape is then trained with cross-entropy plus a distillation term
//! whose teacher distribution is re-weighted toward rare classes by
//! effective-number class weights and renormalized.
//!
//! Module map:
//! - [`math`]: softmax, log-sum-exp, one-hot, the SplitMix64 generator
//! - [`weights`]: effective-number class weights
//! - [`losses`]: CE, class-balanced, distillation and balanced distillation
//! - [`data`]: long-tailed profiles, synthetic data, subset tags, CSV format
//! - [`mlp`]: the network, SGD with momentum, schedules, parameter files
//! - [`pipeline`]: teacher/student training, checkpoints, metric logs
//! - [`eval`]: predictions, accuracy reports, confusion matrices, sweeps
//! - [`config`]: flat experiment configuration
//! - [`gradcheck`]: finite-difference verification

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod io;
pub mod losses;
pub mod math;
pub mod mlp;
pub mod pipeline;
pub mod weights;

pub use error::{Error, Result};
pub use io::write_atomic;
