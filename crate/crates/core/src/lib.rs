//! Few-step generative site-specific beamforming.
//!
//! A transformer velocity field, conditioned on a (possibly masked) RSRP
//! probing report, transports Gaussian noise to an angular-domain beam
//! target in one or a few interval steps. The generated candidates are
//! mapped to constant-modulus beams and the best one is kept after a short
//! verification sweep.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod nn;
pub mod probing;
pub mod selftest;
pub mod signal;
pub mod sitegen;
pub mod training;

pub use error::{Error, Result};
