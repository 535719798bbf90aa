//! Bayesian flow networks for unsupervised anomaly detection on 2-D images.
//!
//! A denoiser trained only on healthy images drives an iterative Bayesian
//! update of a Gaussian belief over pixel intensities. At inference the
//! update is additionally conditioned on the observed input, so the result
//! is a pseudo-healthy reconstruction that stays close to the input outside
//! anomalous regions.

// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bfn;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod phantom;
pub mod schedule;
pub mod seed;

pub use bfn::ThetaState;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use image::ImageTensor;
pub use inference::{InferenceConfig, InferenceMode, ReceiverNoise, ReconstructionResult};
pub use metrics::{MetricsConfig, MetricsReport};
pub use noise::{NoiseConfig, NoiseField, NoiseKind};
pub use schedule::{ScheduleConfig, ScheduleTable};
