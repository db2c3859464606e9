//! Hurdle-lognormal regression for zero-inflated, long-tailed targets, with
//! inversion-model debiasing (IMDL).
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix it to `f64`, which is what training and the experiment
//! pipeline use.

pub mod error;
pub mod experiment;
pub mod hurdle_dist;
pub mod losses;
pub mod network;
pub mod quadrature;
pub mod scalar;
pub mod synthgen;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type LognormalParams64 = hurdle_dist::LognormalParams<f64>;
pub type MarginalPrior64 = hurdle_dist::MarginalPrior<f64>;
pub type HurdleParams64 = hurdle_dist::HurdleParams<f64>;
pub type NllTerms64 = losses::NllTerms<f64>;
pub type LossGrad64 = losses::LossGrad<f64>;
pub type WeightScheme64 = losses::WeightScheme<f64>;
pub type Mlp64 = network::Mlp<f64>;
pub type Model64 = network::Model<f64>;
pub type Objective64 = network::Objective<f64>;
pub type GradeThresholds64 = verify::GradeThresholds<f64>;

pub type LognormalParams32 = hurdle_dist::LognormalParams<f32>;
pub type HurdleParams32 = hurdle_dist::HurdleParams<f32>;
pub type Mlp32 = network::Mlp<f32>;
