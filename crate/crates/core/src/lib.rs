//! Conditional flow matching for signal enhancement, its equivalent
//! diffusion SDE, score-matching baselines, samplers, a small trainable
//! field model and a synthetic STFT-domain enhancement pipeline.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod model;
pub mod paths;
pub mod sde;
pub mod signal;
pub mod solvers;
pub mod state;
pub mod toy;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use field::Field;
pub use model::{Activation, Architecture, EmaState, FieldModel, Mode, RegressionItem};
pub use paths::{GaussianTarget, PathKind, PathSpec};
pub use sde::SdeSpec;
pub use signal::stft::SpectroConfig;
pub use signal::Waveform;
pub use solvers::{Inference, Sampler, TimeGrid};
pub use state::{Shape, StateVector};
pub use training::{Checkpoint, Objective, TrainConfig};
