//! Synthetic two-file linkage data with known truth.
//!
//! Two files of equal size per block; record i of file A is the true match
//! of record i of file B (optionally thinned). Field agreements are drawn
//! independently given match status. Each block has its own counter-based
//! RNG stream so generation is reproducible regardless of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MixtureParams;
use crate::pattern::{BlockData, MAX_FIELDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Scenario 1: one set of field probabilities shared by every block.
    Homogeneous,
    /// Scenario 2: per-block probabilities drawn uniformly from ranges.
    Heterogeneous,
}

/// Field agreement probabilities: explicit per-field values or a uniform
/// range sampled per block and field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FieldProbs {
    PerField(Vec<f64>),
    Range { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatchRateMode {
    /// Every record i of A truly matches record i of B.
    FullOneToOne,
    /// Each diagonal pair is a true match with the given probability.
    Thinned(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of blocks.
    pub s: usize,
    /// Records per file per block (n_a = n_b).
    pub block_size: usize,
    /// Comparison field count.
    pub k: usize,
    pub scenario: Scenario,
    pub m_probs: FieldProbs,
    pub u_probs: FieldProbs,
    pub match_rate_mode: MatchRateMode,
    pub seed: u64,
}

impl SynthConfig {
    /// Scenario 1 defaults: 400 blocks of 25, K = 7, match-class agreement
    /// 0.90 down to 0.60 by 0.05, nonmatch agreement (0.5, 0.5, 0.33, 0.33,
    /// 0.33, 0.25, 0.25).
    pub fn scenario1_defaults(seed: u64) -> Self {
        Self {
            s: 400,
            block_size: 25,
            k: 7,
            scenario: Scenario::Homogeneous,
            m_probs: FieldProbs::PerField(vec![0.90, 0.85, 0.80, 0.75, 0.70, 0.65, 0.60]),
            u_probs: FieldProbs::PerField(vec![0.5, 0.5, 0.33, 0.33, 0.33, 0.25, 0.25]),
            match_rate_mode: MatchRateMode::FullOneToOne,
            seed,
        }
    }

    /// Scenario 2 defaults: per-block match-class agreement in [0.60, 0.90],
    /// nonmatch agreement in [0.20, 0.50].
    pub fn scenario2_defaults(seed: u64) -> Self {
        Self {
            s: 400,
            block_size: 25,
            k: 7,
            scenario: Scenario::Heterogeneous,
            m_probs: FieldProbs::Range { lo: 0.60, hi: 0.90 },
            u_probs: FieldProbs::Range { lo: 0.20, hi: 0.50 },
            match_rate_mode: MatchRateMode::FullOneToOne,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 1 || self.block_size < 1 {
            return Err(Error::Config(
                "block count and block size must be >= 1".into(),
            ));
        }
        if self.k < 1 || self.k > MAX_FIELDS {
            return Err(Error::Config(format!(
                "field count must be in 1..={MAX_FIELDS}, got {}",
                self.k
            )));
        }
        for (name, fp) in [("m_probs", &self.m_probs), ("u_probs", &self.u_probs)] {
            match fp {
                FieldProbs::PerField(v) => {
                    if v.len() != self.k {
                        return Err(Error::Config(format!(
                            "{name} has {} entries, expected K = {}",
                            v.len(),
                            self.k
                        )));
                    }
                    if v.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                        return Err(Error::Config(format!("{name} entries must be in (0,1)")));
                    }
                }
                FieldProbs::Range { lo, hi } => {
                    if !(0.0 < *lo && lo < hi && *hi < 1.0) {
                        return Err(Error::Config(format!(
                            "{name} range must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        if let MatchRateMode::Thinned(rho) = self.match_rate_mode {
            if !(0.0 < rho && rho <= 1.0) {
                return Err(Error::Config(format!(
                    "thinning probability must be in (0,1], got {rho}"
                )));
            }
        }
        Ok(())
    }
}

/// Generating parameters, global or per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrueParams {
    Global(MixtureParams),
    PerBlock(Vec<MixtureParams>),
}

impl TrueParams {
    /// Generating parameters governing block `s`.
    pub fn for_block(&self, s: usize) -> &MixtureParams {
        match self {
            TrueParams::Global(p) => p,
            TrueParams::PerBlock(v) => &v[s],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDataset {
    pub blocks: Vec<BlockData>,
    pub true_params: TrueParams,
    pub config: SynthConfig,
}

/// One generated pair; used when streaming the pair CSV.
#[derive(Debug, Clone, Copy)]
pub struct PairRecord {
    pub block: usize,
    pub a: usize,
    pub b: usize,
    pub pattern: u32,
    pub is_match: bool,
}

fn block_rng(seed: u64, block_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + block_id as u64);
    rng
}

/// Draws the per-block generating parameters (consuming the head of the
/// block's RNG stream), then yields every pair in (a, b) order.
pub(crate) fn generate_block_pairs(
    config: &SynthConfig,
    block_id: usize,
) -> (MixtureParams, Vec<PairRecord>) {
    let mut rng = block_rng(config.seed, block_id);
    let n = config.block_size;
    let k = config.k;

    let resolve = |fp: &FieldProbs, rng: &mut ChaCha8Rng| -> Vec<f64> {
        match fp {
            FieldProbs::PerField(v) => v.clone(),
            FieldProbs::Range { lo, hi } => (0..k).map(|_| rng.gen_range(*lo..*hi)).collect(),
        }
    };
    let m_probs = resolve(&config.m_probs, &mut rng);
    let u_probs = resolve(&config.u_probs, &mut rng);

    let matched: Vec<bool> = match config.match_rate_mode {
        MatchRateMode::FullOneToOne => vec![true; n],
        MatchRateMode::Thinned(rho) => (0..n).map(|_| rng.gen::<f64>() < rho).collect(),
    };
    let n_matched = matched.iter().filter(|&&m| m).count();
    let p_m = (n_matched as f64 / (n as f64 * n as f64)).clamp(1e-12, 1.0 - 1e-12);

    let mut pairs = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let is_match = a == b && matched[a];
            let probs = if is_match { &m_probs } else { &u_probs };
            let mut pattern = 0u32;
            for (field, &p) in probs.iter().enumerate() {
                if rng.gen::<f64>() < p {
                    pattern |= 1 << field;
                }
            }
            pairs.push(PairRecord {
                block: block_id,
                a,
                b,
                pattern,
                is_match,
            });
        }
    }

    let params = MixtureParams {
        p_m,
        p_mk: m_probs,
        p_uk: u_probs,
    };
    (params, pairs)
}

fn aggregate_block(k: usize, block_id: usize, n: usize, pairs: &[PairRecord]) -> BlockData {
    let n_patterns = 1usize << k;
    let mut counts = vec![0u64; n_patterns];
    let mut truth = vec![0u64; n_patterns];
    for p in pairs {
        counts[p.pattern as usize] += 1;
        if p.is_match {
            truth[p.pattern as usize] += 1;
        }
    }
    BlockData {
        block_id,
        n_a: n,
        n_b: n,
        k,
        pattern_counts: counts,
        truth_match_counts: Some(truth),
    }
}

/// Generates the full dataset; blocks are independent and run in parallel.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let per_block: Vec<(MixtureParams, BlockData)> = (0..config.s)
        .into_par_iter()
        .map(|s| {
            let (params, pairs) = generate_block_pairs(config, s);
            let block = aggregate_block(config.k, s, config.block_size, &pairs);
            (params, block)
        })
        .collect();

    let (params, blocks): (Vec<MixtureParams>, Vec<BlockData>) = per_block.into_iter().unzip();
    let true_params = match config.scenario {
        Scenario::Homogeneous => TrueParams::Global(params.into_iter().next().unwrap()),
        Scenario::Heterogeneous => TrueParams::PerBlock(params),
    };
    Ok(SynthDataset {
        blocks,
        true_params,
        config: config.clone(),
    })
}

/// Relative pattern frequencies among true matches and true nonmatches.
///
/// Returns `(match_freq, nonmatch_freq)`, each of length 2^K; an empty class
/// yields all-zero frequencies.
pub fn empirical_pattern_distribution(data: &SynthDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = data.config.k;
    let n_patterns = 1usize << k;
    let mut match_counts = vec![0u64; n_patterns];
    let mut nonmatch_counts = vec![0u64; n_patterns];
    for block in &data.blocks {
        let truth = block
            .truth_match_counts
            .as_ref()
            .ok_or_else(|| Error::Data("truth labels missing".into()))?;
        for p in 0..n_patterns {
            match_counts[p] += truth[p];
            nonmatch_counts[p] += block.pattern_counts[p] - truth[p];
        }
    }
    let normalize = |counts: &[u64]| -> Vec<f64> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        }
    };
    Ok((normalize(&match_counts), normalize(&nonmatch_counts)))
}

/// Per-field empirical agreement rates for one class given its pattern
/// frequency table.
pub fn marginal_agreement_rates(freq: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .map(|field| {
            freq.iter()
                .enumerate()
                .filter(|(p, _)| *p >> field & 1 == 1)
                .map(|(_, f)| f)
                .sum()
        })
        .collect()
}
