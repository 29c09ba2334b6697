//! Beta prior parameterizations and the (theta, tau) transform.
//!
//! `theta = logit(alpha/(alpha+beta))` carries the Beta mean and
//! `tau = log(alpha+beta)` its prior sample size; the inverse is
//! `alpha = e^tau * expit(theta)`, `beta = e^tau * expit(-theta)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (alpha, beta) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPair {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaPair {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!(
                "Beta parameters must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn sd(&self) -> f64 {
        let n = self.alpha + self.beta;
        (self.alpha * self.beta / (n * n * (n + 1.0))).sqrt()
    }
}

/// Independent Beta priors for the match rate and each field x class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPriorSet {
    pub match_rate: BetaPair,
    pub per_field_m: Vec<BetaPair>,
    pub per_field_u: Vec<BetaPair>,
}

impl BetaPriorSet {
    pub fn k(&self) -> usize {
        self.per_field_m.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_field_m.len() != self.per_field_u.len() || self.per_field_m.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.per_field_m.len().max(1),
                got: self.per_field_u.len(),
            });
        }
        Ok(())
    }
}

/// Mean/size coordinates for a Beta distribution's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaTau {
    pub theta: f64,
    pub tau: f64,
}

impl ThetaTau {
    pub fn new(theta: f64, tau: f64) -> Result<Self> {
        if !(theta.is_finite() && tau.is_finite()) {
            return Err(Error::Domain(format!(
                "(theta, tau) must be finite, got ({theta}, {tau})"
            )));
        }
        Ok(Self { theta, tau })
    }

    pub fn from_alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::Domain(format!(
                "alpha and beta must be positive, got ({alpha}, {beta})"
            )));
        }
        // logit(a/(a+b)) = ln a - ln b
        Self::new(alpha.ln() - beta.ln(), (alpha + beta).ln())
    }

    pub fn to_alpha_beta(self) -> BetaPair {
        let n = self.tau.exp();
        BetaPair {
            alpha: n * expit(self.theta),
            beta: n * expit(-self.theta),
        }
    }
}

/// log(p / (1-p)).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable inverse logit.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matches a Beta distribution to a (mean, sd) pair.
///
/// alpha + beta = mean(1-mean)/sd^2 - 1, alpha = mean * (alpha + beta).
pub fn beta_from_moments(mean: f64, sd: f64) -> Result<BetaPair> {
    if !(mean > 0.0 && mean < 1.0) {
        return Err(Error::Domain(format!("mean must be in (0,1), got {mean}")));
    }
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::Domain(format!("sd must be positive, got {sd}")));
    }
    let bound = mean * (1.0 - mean);
    let sd_sq = sd * sd;
    if sd_sq >= bound {
        return Err(Error::InfeasibleMoments { sd_sq, bound });
    }
    let size = bound / sd_sq - 1.0;
    BetaPair::new(mean * size, (1.0 - mean) * size)
}
