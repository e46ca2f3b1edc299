//! HSIC-regularized rehearsal for class-incremental continual learning.
//!
//! The numeric core ([`numerics`], [`hsic`], [`network`], [`losses`]) is generic
//! over the floating point type through [`Scalar`]; experiments run in `f64`
//! through the aliases below.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod hsic;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod results;
pub mod rng;
pub mod scalar;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type MlpParams = network::MlpParams<f64>;
pub type ProjectionHead = network::ProjectionHead<f64>;
pub type ForwardTrace = network::ForwardTrace<f64>;
pub type Model = network::Model<f64>;
pub type ModelGrads = network::ModelGrads<f64>;
