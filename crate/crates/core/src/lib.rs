//! Conditional normalizing flow for spatio-temporal trajectory forecasting.
//!
//! A per-frame bijection (squeeze, then K steps of actnorm, LU-parameterized
//! channel mixing and affine coupling) is conditioned on the observed input
//! sequence through locally masked convolutions; a time-factorized Gaussian
//! prior with a gated residual network captures the dynamics of the output
//! frames. Exact log-likelihood training runs on a reverse-mode
//! differentiation record whose gradients are certified against finite
//! differences. A small particle simulator, a trainer, an evaluator and CSV
//! ingestion round out the library; the companion CLI crate exposes them as
//! commands.

#![allow(clippy::needless_range_loop)]

pub mod ablate;
pub mod checkpoint;
pub mod conditioner;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod layers;
pub mod masking;
pub mod model;
pub mod optim;
pub mod params;
pub mod prior;
pub mod series;
pub mod simulator;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::ModelConfig;
pub use data::{Dataset, Geometry, Sample, Split};
pub use error::{Error, Result};
pub use model::{Model, PredictMode};
pub use params::{ParamId, ParamStore, Parameter};
pub use simulator::SimConfig;
pub use tape::{Graph, Var};
pub use tensor::{Precision, Real, Tensor};
