//! Cross-modal deep continuous metric learning for emotion-based
//! image/music matching in valence-arousal space.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pin the `f64` configuration the
//! pipeline and command-line tool use.

// `!(x > 0.0)` is the NaN-rejecting form of the range checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
mod fsio;
pub mod scalar;
pub mod seed;
pub mod trainer;
pub mod va;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;

pub type Model = nn::ModelParams<f64>;
pub type Model32 = nn::ModelParams<f32>;
pub type Net = nn::Network<f64>;
pub type Net32 = nn::Network<f32>;
pub type Scale = va::SimilarityScale<f64>;
pub type Va = va::VaPoint<f64>;
