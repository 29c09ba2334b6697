//! Convergence and sampler-health diagnostics: the Gelman-Rubin potential
//! scale reduction factor and MH acceptance-rate reports.

use serde::{Deserialize, Serialize};

use crate::blcm::ChainDraws;
use crate::error::{Error, Result};
use crate::hblcm::MhStats;

/// Potential scale reduction factor over m chains of equal length n:
/// sqrt(((n-1)/n * W + B/n) / W), with B the between-chain variance
/// (n times the sample variance of the chain means) and W the mean
/// within-chain sample variance.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Domain(format!(
            "potential scale reduction needs >= 2 chains, got {m}"
        )));
    }
    let n = chains[0].len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "potential scale reduction needs >= 2 draws per chain, got {n}"
        )));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: chains.iter().map(Vec::len).find(|&l| l != n).unwrap(),
        });
    }
    let nf = n as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / nf)
        .collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf * means.iter().map(|&x| (x - grand) * (x - grand)).sum::<f64>()
        / (m as f64 - 1.0);
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| c.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;

    if w == 0.0 {
        if b == 0.0 {
            // all draws identical everywhere: nothing to reduce
            return Ok(1.0);
        }
        return Err(Error::Numerical(
            "zero within-chain variance with nonzero between-chain variance".into(),
        ));
    }
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Per-parameter PSRF for a set of chains sharing parameter layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsrfReport {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl PsrfReport {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NAN, f64::max)
    }
}

/// Computes the PSRF of every parameter column across chains.
pub fn psrf_report(chains: &[ChainDraws]) -> Result<PsrfReport> {
    let first = chains
        .first()
        .ok_or_else(|| Error::Data("no chains supplied".into()))?;
    let names = first.names.clone();
    let mut values = Vec::with_capacity(names.len());
    for j in 0..names.len() {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j)).collect();
        values.push(psrf(&cols)?);
    }
    Ok(PsrfReport { names, values })
}

/// One family's acceptance summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptanceEntry {
    pub family: String,
    /// Pooled acceptance rate; `None` when no proposals were recorded.
    pub rate: Option<f64>,
    pub proposals: u64,
    pub h: f64,
    /// True when the rate falls outside the healthy band.
    pub flagged: bool,
}

/// Acceptance-rate report over the MH families of one or more chains,
/// flagging rates outside [lo, hi] and families with zero proposals.
pub fn acceptance_report(stats: &[MhStats], lo: f64, hi: f64) -> Result<Vec<AcceptanceEntry>> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Data("no MH statistics supplied".into()))?;
    let mut pooled = first.clone();
    for s in &stats[1..] {
        if s.family_names != pooled.family_names {
            return Err(Error::Data("chains disagree on MH family layout".into()));
        }
        pooled.merge(s);
    }
    Ok(pooled
        .family_names
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let proposals: u64 = pooled.proposals[f].iter().sum();
            let rate = pooled.family_rate(f);
            AcceptanceEntry {
                family: name.clone(),
                rate,
                proposals,
                h: pooled.h[f],
                flagged: match rate {
                    Some(r) => r < lo || r > hi,
                    None => true,
                },
            }
        })
        .collect())
}
