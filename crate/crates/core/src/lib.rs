//! Interacting multiple model estimation for jump Markov linear systems whose
//! measurement-noise covariance is unknown and tracked as an inverse-Wishart
//! random matrix.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dist;
mod error;
pub mod imm;
pub mod linalg;
pub mod model;
pub mod selfcheck;
pub mod sim;

pub use dist::{GaussianEstimate, InverseWishart, WeightedComponents};
pub use error::{Error, Result};
pub use imm::{FilterConfig, ImmFilter, Variant};
pub use model::{JumpMarkovModel, TruthConfig};
pub use sim::ExperimentConfig;
