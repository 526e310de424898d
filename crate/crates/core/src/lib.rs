//! Separable covariance estimation for sparsely and noisily observed random
//! surfaces, with BLUP reconstruction and confidence bands.
//!
//! The pipeline: grid the observations ([`data`]), smooth the mean and the
//! marginalized raw covariances ([`smoothing`], [`separable`]), then predict
//! individual surfaces from their own sparse observations ([`prediction`]).
//! [`baselines`] holds the comparators, [`bandwidth`] the cross-validation and
//! [`simstudy`] the simulation scenarios and evaluation harness.

pub mod bandwidth;
pub mod baselines;
pub mod data;
pub mod error;
pub mod linalg;
mod par;
pub mod prediction;
pub mod rng;
pub mod separable;
pub mod simstudy;
pub mod smoothing;

pub use error::{Error, Result};
