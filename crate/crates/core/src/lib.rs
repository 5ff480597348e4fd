//! Bayesian model comparison with the prequential Hyvärinen score.
//!
//! The crate estimates, observation by observation, the cumulative
//! Hyvärinen score (H-score) and the log-evidence of candidate models:
//!
//! * [`smc`] runs an adaptive-tempering SMC sampler over parameters for
//!   models with tractable likelihoods;
//! * [`smc2`] nests bootstrap particle filters inside the parameter cloud for
//!   state-space models, with derivative, kernel-density and discrete score
//!   paths;
//! * [`scoring`], [`kde`] and [`oracle`] hold the scoring rules, the kernel
//!   density fallback and the closed-form references used to validate the
//!   Monte Carlo estimators;
//! * [`experiments`] reproduces the Normal, phase-plane, Lévy-driven
//!   stochastic volatility and population-dynamics studies.
//!
//! The pure numerical layers are generic over the scalar type (see
//! [`Real`]); the samplers are instantiated at `f64`. Concrete aliases for
//! both precisions are exported at the crate root.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod kde;
pub mod mixture;
pub mod models;
pub mod num;
pub mod oracle;
pub mod resample;
pub mod rng;
pub mod scoring;
pub mod smc;
pub mod smc2;
pub mod trace;
pub mod weights;

pub use error::{Error, Result};
pub use num::Real;

/// Log-density derivatives in double precision.
pub type DensityDerivativesF64 = scoring::DensityDerivatives<f64>;
/// Log-density derivatives in single precision.
pub type DensityDerivativesF32 = scoring::DensityDerivatives<f32>;
/// Per-observation score increment in double precision.
pub type ScoreIncrementF64 = scoring::ScoreIncrement<f64>;
/// Per-observation score increment in single precision.
pub type ScoreIncrementF32 = scoring::ScoreIncrement<f32>;
/// Kernel density estimate in double precision.
pub type KdeEstimateF64 = kde::KdeEstimate<f64>;
/// Kernel density estimate in single precision.
pub type KdeEstimateF32 = kde::KdeEstimate<f32>;
/// Gaussian predictive in double precision.
pub type GaussianPredictiveF64 = oracle::GaussianPredictive<f64>;
/// Gaussian predictive in single precision.
pub type GaussianPredictiveF32 = oracle::GaussianPredictive<f32>;
/// Prequential trace in double precision.
pub type PrequentialTraceF64 = trace::PrequentialTrace<f64>;
