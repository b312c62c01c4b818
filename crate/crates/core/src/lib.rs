//! Optimized linear measurements under a learned denoiser prior.
//!
//! A desk-scale library for studying which low-rank linear measurements best
//! support signal reconstruction when the reconstruction uses the prior
//! implicit in a least-squares denoiser. It provides:
//!
//! - a small reverse-mode autodiff engine over dense `f64` tensors
//!   ([`ndgrad`]),
//! - generators for three structured 2-D distributions plus image ingestion
//!   ([`datasets`]),
//! - bias-free denoiser training and an analytic Gaussian-prior oracle
//!   ([`denoiser`]),
//! - score-ascent samplers for unconditional and measurement-constrained
//!   generation, with a differentiable unrolled reconstruction path
//!   ([`sampler`]),
//! - orthonormal measurement-matrix optimization via a Householder-product
//!   parameterization ([`measure_opt`]),
//! - PCA/ICA/random baselines and subspace/statistics diagnostics
//!   ([`baselines`], [`analysis`]),
//! - a reproducible experiment driver behind the `olm` binary
//!   ([`config`], [`experiment`], [`report`]).

pub mod analysis;
pub mod baselines;
pub mod config;
pub mod datasets;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod measure_opt;
pub mod ndgrad;
pub mod report;
pub mod rng;
pub mod sampler;

pub use error::{OlmError, Result};
pub use ndgrad::Tensor;
