//! Parametric inference for finite-state stationary Markov chains.
//!
//! The crate fits chain models by maximum likelihood (ML), pseudo-likelihood
//! (PL, products of full conditionals) and quasi/composite likelihood (QL,
//! products of low-order marginals), and carries the full large-sample
//! apparatus for all three: information and sandwich matrices, limit
//! standard deviations, count-vector covariance oracles, delta-method
//! inference for derived parameters, and least-false analysis when the
//! fitted model is wrong.
//!
//! Everything numeric is generic over the scalar type through
//! [`Scalar`]; the `*64` aliases below pin the common `f64` instantiation.

pub mod asymptotics;
pub mod chain;
pub mod counts;
pub mod covariance;
pub mod error;
pub mod estimate;
pub mod likelihood;
pub mod misspec;
pub mod model;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TransitionMatrix64 = chain::TransitionMatrix<f64>;
pub type StationaryDistribution64 = chain::StationaryDistribution<f64>;
pub type GammaMatrices64 = chain::GammaMatrices<f64>;
pub type TupleCounts64 = counts::TupleCounts<f64>;
// placeholder alias
// placeholder alias
// placeholder alias
// placeholder alias
// placeholder alias
