//! Bayesian neural networks with a Gaussian final layer and a discrete prior
//! over the interior weights. The posterior predictive at a test point is a
//! finite Gaussian mixture whose weights are the marginal likelihoods of the
//! candidates.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blr;
pub mod classify;
pub mod construct;
pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod io;
pub mod mixture;
pub mod rng;
pub mod source;

pub use error::{Error, Result};
