//! Nonvacuous PAC-Bayes bounds for stochastic ReLU networks.
//!
//! The pipeline trains a network by SGD ([`sgd`]), optimizes a Gaussian
//! posterior around it against a PAC-Bayes bound ([`pacbayes`]) and certifies
//! the bound by Monte Carlo ([`certify`]). [`pathnorm`] holds the path-norm
//! margin bound used as a baseline.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod container;
pub mod data;
pub mod error;
pub mod kl;
pub mod nn;
pub mod pacbayes;
pub mod pathnorm;
pub mod rng;
pub mod sgd;

pub use error::{Error, Result};
pub use nn::{MlpArchitecture, WeightVector};
