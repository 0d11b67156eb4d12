//! Identification of continuous-time nonlinear state-space models from
//! sampled input/output data with neural-network parameterizations and
//! state-derivative normalization.
//!
//! Modules:
//! - [`autodiff`]: reverse-mode AD over dense tensors (the training engine).
//! - [`nn`]: the state, output, encoder, and auxiliary networks.
//! - [`ode`]: differentiable fixed-step RK4 on the normalized field.
//! - [`sdn`]: the normalization factor and its estimators.
//! - [`bla`]: best linear approximation and the variance heuristic.
//! - [`train`]: truncated simulation-error training loop.
//! - [`data`]: signals, normalization, splits, synthetic tank system.
//! - [`config`]: run configuration with benchmark defaults.
//! - [`checkpoint`]: lossless structured-text persistence.

pub mod autodiff;
pub mod bla;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod nn;
pub mod ode;
pub mod sdn;
pub mod train;

pub use autodiff::{Tape, Tensor, TensorRef};
pub use config::{RunConfig, TauMode};
pub use data::{Signal, SignalPair};
pub use nn::{ModelDims, ModelParams};
pub use sdn::{NormFactor, TauKind};
