//! Two-class conditional-independence mixture kernels.
//!
//! The mixture density of a pattern is
//! `Pr(gamma) = Pr(gamma|M) p_M + Pr(gamma|U) (1 - p_M)` with each class
//! density a product of independent Bernoulli terms. Everything is evaluated
//! in log space; the posterior match probability uses a two-term
//! log-sum-exp.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{pattern_agrees, ComparisonPattern};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before any
/// likelihood evaluation to keep degenerate EM/Gibbs states finite.
pub const PROB_FLOOR: f64 = 1e-9;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times a parameter had to be clamped away from 0 or 1.
pub fn clamp_event_count() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Clamps a probability into the open unit interval, counting clamp events.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    if p < PROB_FLOOR {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR
    } else if p > 1.0 - PROB_FLOOR {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        1.0 - PROB_FLOOR
    } else {
        p
    }
}

/// Global (or per-block) mixture parameters: match rate plus per-field
/// agreement probabilities in each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub p_m: f64,
    /// Pr(gamma_k = 1 | M) for each field.
    pub p_mk: Vec<f64>,
    /// Pr(gamma_k = 1 | U) for each field.
    pub p_uk: Vec<f64>,
}

impl MixtureParams {
    pub fn new(p_m: f64, p_mk: Vec<f64>, p_uk: Vec<f64>) -> Result<Self> {
        if !(p_m > 0.0 && p_m < 1.0) {
            return Err(Error::Domain(format!("p_M must be in (0,1), got {p_m}")));
        }
        if p_mk.len() != p_uk.len() || p_mk.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: p_mk.len().max(1),
                got: p_uk.len(),
            });
        }
        for &p in p_mk.iter().chain(&p_uk) {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!(
                    "field probabilities must be in (0,1), got {p}"
                )));
            }
        }
        Ok(Self { p_m, p_mk, p_uk })
    }

    pub fn k(&self) -> usize {
        self.p_mk.len()
    }
}

/// Log-likelihood of packed pattern `index` under per-field agreement
/// probabilities `probs` (clamped).
#[inline]
pub fn log_pattern_likelihood(index: u32, probs: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        let p = clamp_prob(p);
        ll += if pattern_agrees(index, k) {
            p.ln()
        } else {
            (1.0 - p).ln()
        };
    }
    ll
}

/// Class-conditional pattern likelihood: prod_k p_k^{g_k} (1-p_k)^{1-g_k}.
pub fn pattern_likelihood(pattern: &ComparisonPattern, probs: &[f64]) -> Result<f64> {
    if probs.len() != pattern.k() {
        return Err(Error::DimensionMismatch {
            expected: pattern.k(),
            got: probs.len(),
        });
    }
    Ok(log_pattern_likelihood(pattern.index(), probs).exp())
}

/// Posterior match probability for a packed pattern index.
#[inline]
pub fn posterior_match_prob_index(index: u32, params: &MixtureParams) -> f64 {
    let p_m = clamp_prob(params.p_m);
    let log_m = p_m.ln() + log_pattern_likelihood(index, &params.p_mk);
    let log_u = (1.0 - p_m).ln() + log_pattern_likelihood(index, &params.p_uk);
    // 1 / (1 + exp(log_u - log_m)), stable for either sign
    let d = log_u - log_m;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// Posterior probability that the pair is a match given its pattern.
pub fn posterior_match_prob(pattern: &ComparisonPattern, params: &MixtureParams) -> Result<f64> {
    if params.k() != pattern.k() {
        return Err(Error::DimensionMismatch {
            expected: pattern.k(),
            got: params.k(),
        });
    }
    Ok(posterior_match_prob_index(pattern.index(), params))
}

/// Posterior match probability for every pattern index 0..2^K.
pub fn pattern_posteriors(k: usize, params: &MixtureParams) -> Result<Vec<f64>> {
    if params.k() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: params.k(),
        });
    }
    Ok((0..1u32 << k)
        .map(|p| posterior_match_prob_index(p, params))
        .collect())
}

/// Log marginal likelihood of a packed pattern under the mixture.
#[inline]
pub fn log_mixture_likelihood(index: u32, params: &MixtureParams) -> f64 {
    let p_m = clamp_prob(params.p_m);
    let log_m = p_m.ln() + log_pattern_likelihood(index, &params.p_mk);
    let log_u = (1.0 - p_m).ln() + log_pattern_likelihood(index, &params.p_uk);
    let hi = log_m.max(log_u);
    hi + ((log_m - hi).exp() + (log_u - hi).exp()).ln()
}
