//! Latent class record linkage: mixture-model kernels, synthetic data
//! generation, EM, Bayesian and hierarchical Bayesian samplers, convergence
//! diagnostics, and the experiment harness.

pub mod blcm;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod experiment;
pub mod hblcm;
pub mod mixture;
pub mod pattern;
pub mod priors;
pub mod synth;

pub use error::{Error, Result};
pub use mixture::MixtureParams;
pub use pattern::{BlockData, ComparisonPattern, MatchIndicators};
pub use priors::{BetaPair, BetaPriorSet, ThetaTau};
