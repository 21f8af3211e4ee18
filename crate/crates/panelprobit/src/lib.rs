//! Bayesian multivariate random-effects probit models for longitudinal
//! dyadic panel data.
//!
//! The model family links R binary outcomes per person-wave through a latent
//! multivariate normal: a two-level variant with individual random effects,
//! and a three-level variant that adds couple-cluster effects (one fixed per
//! cluster, one varying by wave) so that correlation between partners can
//! exceed correlation within a person over time. Estimation is Gibbs
//! sampling with a per-coordinate Metropolis step for the residual
//! correlations.

pub mod analysis;
pub mod data;
pub mod diagnostics;
mod error;
pub mod normal;
mod parallel;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod stochastic;

pub use error::{Error, Result};
pub use stochastic::{CorrVector, CovMatrix, TruncationBox};
