//! Bayesian neural networks for classification: variational inference,
//! MC-Dropout, SGLD and the Laplace approximation over a shared MLP backbone,
//! with posterior-predictive averaging and calibration metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod laplace;
pub mod mc_dropout;
pub mod mlp;
pub mod model;
pub mod params;
pub mod predictive;
pub mod rng;
pub mod sgd;
pub mod sgld;
pub mod train;
pub mod vi;

pub use error::{Error, Result};
