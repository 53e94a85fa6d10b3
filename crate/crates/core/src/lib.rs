//! Adversarial counterfactual explanations for univariate satellite
//! time-series classifiers.
//!
//! The crate trains a 1-D convolutional land-cover classifier, then learns a
//! noiser network whose additive perturbations flip the classifier's
//! decision while a discriminator keeps the perturbed series plausible and a
//! circularly weighted L1 penalty keeps the perturbation localized in time.

pub mod data;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod models;
pub mod nnkernel;
pub mod persistence;
pub mod report;
pub mod training;

pub use error::{Error, Result};
