//! Comparison patterns and per-block sufficient statistics.
//!
//! A record pair's agreement vector over `K` fields is bit-packed into a
//! pattern index (bit `k` set means agreement on field `k`). Pairs with the
//! same pattern are exchangeable under every model here, so blocks carry
//! per-pattern counts instead of per-pair rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard ceiling on the number of comparison fields; 2^K counters per block.
pub const MAX_FIELDS: usize = 20;

/// Bit-packed agreement/disagreement vector for a record pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComparisonPattern {
    index: u32,
    k: usize,
}

impl ComparisonPattern {
    /// Builds a pattern from explicit 0/1 entries.
    pub fn new(bits: &[u8]) -> Result<Self> {
        let k = bits.len();
        if k == 0 || k > MAX_FIELDS {
            return Err(Error::Domain(format!(
                "field count must be in 1..={MAX_FIELDS}, got {k}"
            )));
        }
        let mut index = 0u32;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => index |= 1 << i,
                other => {
                    return Err(Error::Domain(format!(
                        "pattern entries must be 0 or 1, got {other} at field {i}"
                    )))
                }
            }
        }
        Ok(Self { index, k })
    }

    /// Builds a pattern from its packed index.
    pub fn from_index(index: u32, k: usize) -> Result<Self> {
        if k == 0 || k > MAX_FIELDS {
            return Err(Error::Domain(format!(
                "field count must be in 1..={MAX_FIELDS}, got {k}"
            )));
        }
        if (index as u64) >= (1u64 << k) {
            return Err(Error::Domain(format!(
                "pattern index {index} out of range for K={k}"
            )));
        }
        Ok(Self { index, k })
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Agreement indicator for field `field`.
    pub fn agrees(&self, field: usize) -> bool {
        debug_assert!(field < self.k);
        self.index >> field & 1 == 1
    }

    /// Unpacks to a 0/1 vector of length K.
    pub fn bits(&self) -> Vec<u8> {
        (0..self.k).map(|i| (self.index >> i & 1) as u8).collect()
    }
}

/// Agreement indicator for field `field` of packed pattern `index`.
#[inline]
pub fn pattern_agrees(index: u32, field: usize) -> bool {
    index >> field & 1 == 1
}

/// Pattern-count sufficient statistics for one block, with optional truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockData {
    pub block_id: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub k: usize,
    /// `pattern_counts[p]` = number of pairs with packed pattern `p`; length 2^K.
    pub pattern_counts: Vec<u64>,
    /// `truth_match_counts[p]` = true matches among pairs with pattern `p`.
    pub truth_match_counts: Option<Vec<u64>>,
}

impl BlockData {
    pub fn new(
        block_id: usize,
        n_a: usize,
        n_b: usize,
        k: usize,
        pattern_counts: Vec<u64>,
        truth_match_counts: Option<Vec<u64>>,
    ) -> Result<Self> {
        if k == 0 || k > MAX_FIELDS {
            return Err(Error::Domain(format!(
                "field count must be in 1..={MAX_FIELDS}, got {k}"
            )));
        }
        let n_patterns = 1usize << k;
        if pattern_counts.len() != n_patterns {
            return Err(Error::DimensionMismatch {
                expected: n_patterns,
                got: pattern_counts.len(),
            });
        }
        let total: u64 = pattern_counts.iter().sum();
        if total != (n_a as u64) * (n_b as u64) {
            return Err(Error::Data(format!(
                "block {block_id}: pattern counts sum to {total}, expected {}",
                (n_a as u64) * (n_b as u64)
            )));
        }
        if let Some(ref truth) = truth_match_counts {
            if truth.len() != n_patterns {
                return Err(Error::DimensionMismatch {
                    expected: n_patterns,
                    got: truth.len(),
                });
            }
            for (p, (&t, &c)) in truth.iter().zip(&pattern_counts).enumerate() {
                if t > c {
                    return Err(Error::Data(format!(
                        "block {block_id}: truth count {t} exceeds pair count {c} for pattern {p}"
                    )));
                }
            }
        }
        Ok(Self {
            block_id,
            n_a,
            n_b,
            k,
            pattern_counts,
            truth_match_counts,
        })
    }

    pub fn n_pairs(&self) -> u64 {
        (self.n_a as u64) * (self.n_b as u64)
    }

    /// Structural upper bound on the block match rate:
    /// min(n_a, n_b) / (n_a * n_b).
    pub fn match_rate_cap(&self) -> f64 {
        self.n_a.min(self.n_b) as f64 / (self.n_a as f64 * self.n_b as f64)
    }

    pub fn total_true_matches(&self) -> Option<u64> {
        self.truth_match_counts.as_ref().map(|t| t.iter().sum())
    }
}

/// Per-pattern sampled match counts for one block (or pooled blocks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchIndicators {
    /// `match_counts[p]` = sampled number of matched pairs with pattern `p`.
    pub match_counts: Vec<u64>,
}

impl MatchIndicators {
    pub fn total(&self) -> u64 {
        self.match_counts.iter().sum()
    }
}

/// Pools per-block pattern counts into a single global table.
pub fn pool_pattern_counts(blocks: &[BlockData]) -> Result<(usize, Vec<u64>)> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Data("no blocks supplied".into()))?;
    let k = first.k;
    let mut pooled = vec![0u64; 1 << k];
    for b in blocks {
        if b.k != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: b.k,
            });
        }
        for (dst, &c) in pooled.iter_mut().zip(&b.pattern_counts) {
            *dst += c;
        }
    }
    Ok((k, pooled))
}
