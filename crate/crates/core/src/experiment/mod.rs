//! Experiment orchestration: configuration, file formats, and the
//! replication runner comparing linkage methods on synthetic data.

pub mod formats;
pub mod runner;

use serde::{Deserialize, Serialize};

use crate::blcm::{ConstraintMode, GibbsSettings};
use crate::error::{Error, Result};
use crate::hblcm::{AdaptSettings, FamilySpec, HblcmSettings, HyperMeanMapping, HyperPriorSpec, MhMode};
use crate::priors::{beta_from_moments, BetaPriorSet, ThetaTau};
use crate::synth::SynthConfig;

pub use runner::{
    elicited_priors, error_rates, recovery_mae, run_experiment, write_reports, ErrorRates,
    ExperimentReport, Method, MethodOutcome, RepReport,
};

/// Built-in scale presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small and fast: 40 blocks, 20 replications, short chains.
    Desk,
    /// Full scale: 400 blocks, 1,000 replications, long chains.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub s: usize,
    pub block_size: usize,
    pub k: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            s: 40,
            block_size: 25,
            k: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSection {
    pub n_chains: usize,
    pub burn_in: usize,
    pub n_keep: usize,
    pub thin: usize,
}

impl Default for GibbsSection {
    fn default() -> Self {
        Self {
            n_chains: 4,
            burn_in: 500,
            n_keep: 1000,
            thin: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HblcmSection {
    pub n_chains: usize,
    pub burn_in: usize,
    pub n_keep: usize,
    pub thin: usize,
    pub adapt_sweeps: usize,
    pub window: usize,
    pub target: f64,
    pub kappa: f64,
    pub theta_ordering: bool,
    pub paper_literal_ratio: bool,
    pub means_as_printed: bool,
}

impl Default for HblcmSection {
    fn default() -> Self {
        Self {
            n_chains: 2,
            burn_in: 500,
            n_keep: 1000,
            thin: 1,
            adapt_sweeps: 500,
            window: 50,
            target: 0.35,
            kappa: 1.0,
            theta_ordering: false,
            paper_literal_ratio: false,
            means_as_printed: false,
        }
    }
}

/// Prior elicitation constants: moment targets for the three Beta priors
/// and the hyperprior covariance structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElicitationSection {
    /// Match-class agreement prior moments (per field).
    pub m_mean: f64,
    pub m_sd: f64,
    /// Nonmatch-class agreement prior moments (per field).
    pub u_mean: f64,
    pub u_sd: f64,
    /// Match-rate prior moments.
    pub rate_mean: f64,
    pub rate_sd: f64,
    /// Hyperprior variances and covariances on the (theta, tau) scale, per
    /// family.
    pub var_theta_m_field: f64,
    pub cov_m_field: f64,
    pub var_theta_u_field: f64,
    pub cov_u_field: f64,
    pub var_theta_rate: f64,
    pub cov_rate: f64,
    /// Common tau variance for all families.
    pub var_tau: f64,
    /// Initial MH tuning constant for every family.
    pub h_init: f64,
}

impl Default for ElicitationSection {
    fn default() -> Self {
        Self {
            m_mean: 0.80,
            m_sd: 0.075,
            u_mean: 0.25,
            u_sd: 0.075,
            rate_mean: 0.03,
            rate_sd: 0.005,
            var_theta_m_field: 0.1325,
            cov_m_field: -0.08,
            var_theta_u_field: 0.1492,
            cov_u_field: -0.01,
            var_theta_rate: 0.059,
            cov_rate: 0.03,
            var_tau: 0.23,
            h_init: 0.5,
        }
    }
}

impl ElicitationSection {
    /// The three moment-matched Beta priors, replicated over K fields.
    pub fn beta_priors(&self, k: usize) -> Result<BetaPriorSet> {
        Ok(BetaPriorSet {
            match_rate: beta_from_moments(self.rate_mean, self.rate_sd)?,
            per_field_m: vec![beta_from_moments(self.m_mean, self.m_sd)?; k],
            per_field_u: vec![beta_from_moments(self.u_mean, self.u_sd)?; k],
        })
    }

    /// Bivariate-normal hyperpriors centered at the moment-matched priors'
    /// (theta, tau) coordinates, with the elicited (co)variances.
    pub fn hyper_priors(&self, k: usize, mapping: HyperMeanMapping) -> Result<HyperPriorSpec> {
        let center = |mean: f64, sd: f64| -> Result<ThetaTau> {
            let pair = beta_from_moments(mean, sd)?;
            ThetaTau::from_alpha_beta(pair.alpha, pair.beta)
        };
        let m_center = center(self.m_mean, self.m_sd)?;
        let u_center = center(self.u_mean, self.u_sd)?;
        let rate_center = center(self.rate_mean, self.rate_sd)?;
        let (m_mu, u_mu, rate_mu) = match mapping {
            HyperMeanMapping::Corrected => (m_center, u_center, rate_center),
            HyperMeanMapping::AsPrinted => (u_center, rate_center, m_center),
        };
        let family = |mu: ThetaTau, var_theta: f64, cov: f64| FamilySpec {
            mu_theta: mu.theta,
            mu_tau: mu.tau,
            var_theta,
            var_tau: self.var_tau,
            cov,
            h: self.h_init,
        };
        let spec = HyperPriorSpec {
            match_rate: family(rate_mu, self.var_theta_rate, self.cov_rate),
            per_field_m: vec![family(m_mu, self.var_theta_m_field, self.cov_m_field); k],
            per_field_u: vec![family(u_mu, self.var_theta_u_field, self.cov_u_field); k],
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub reps: usize,
    /// Generating scenario: 1 homogeneous, 2 heterogeneous.
    pub scenario: u8,
    /// Posterior match probability (or proportion) at or above which a pair
    /// is declared a link.
    pub cutoff: f64,
    pub methods: Vec<Method>,
    /// Leading blocks held out to build the training prior; they are
    /// excluded from every method's evaluation set.
    pub training_blocks: usize,
    pub synth: SynthSection,
    pub gibbs: GibbsSection,
    pub hblcm: HblcmSection,
    pub elicitation: ElicitationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reps: 20,
            scenario: 2,
            cutoff: 0.90,
            methods: vec![
                Method::Lca,
                Method::BlcmElicited,
                Method::BlcmTraining,
                Method::Hblcm,
            ],
            training_blocks: 2,
            synth: SynthSection::default(),
            gibbs: GibbsSection::default(),
            hblcm: HblcmSection::default(),
            elicitation: ElicitationSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Profile presets; the desk profile is the `Default`.
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::default(),
            Profile::Paper => Self {
                reps: 1000,
                synth: SynthSection {
                    s: 400,
                    ..SynthSection::default()
                },
                gibbs: GibbsSection {
                    n_chains: 4,
                    burn_in: 1000,
                    n_keep: 2000,
                    thin: 1,
                },
                hblcm: HblcmSection {
                    n_chains: 4,
                    burn_in: 1000,
                    n_keep: 2000,
                    ..HblcmSection::default()
                },
                training_blocks: 20,
                ..Self::default()
            },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scenario == 1 || self.scenario == 2) {
            return Err(Error::Config(format!(
                "scenario must be 1 or 2, got {}",
                self.scenario
            )));
        }
        if self.reps < 1 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::Config(format!(
                "cutoff must be in (0,1], got {}",
                self.cutoff
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.training_blocks >= self.synth.s {
            return Err(Error::Config(format!(
                "training_blocks ({}) must leave at least one evaluation block of {}",
                self.training_blocks, self.synth.s
            )));
        }
        if self.methods.contains(&Method::BlcmTraining) && self.training_blocks == 0 {
            return Err(Error::Config(
                "the training-prior method needs training_blocks >= 1".into(),
            ));
        }
        self.synth_config(0).validate()?;
        self.elicitation.beta_priors(self.synth.k)?;
        self.elicitation.hyper_priors(self.synth.k, self.mean_mapping())?;
        Ok(())
    }

    /// Generator settings for one replication.
    pub fn synth_config(&self, rep: usize) -> SynthConfig {
        let base = if self.scenario == 1 {
            SynthConfig::scenario1_defaults(self.seed + rep as u64)
        } else {
            SynthConfig::scenario2_defaults(self.seed + rep as u64)
        };
        SynthConfig {
            s: self.synth.s,
            block_size: self.synth.block_size,
            ..base
        }
    }

    /// Pooled-sampler settings for one replication.
    pub fn gibbs_settings(&self, rep: usize) -> GibbsSettings {
        GibbsSettings {
            n_chains: self.gibbs.n_chains,
            burn_in: self.gibbs.burn_in,
            n_keep: self.gibbs.n_keep,
            thin: self.gibbs.thin,
            seed: self.seed + rep as u64,
            constraint_mode: ConstraintMode::Reject,
            cap: None,
        }
    }

    /// Hierarchical-sampler settings for one replication.
    pub fn hblcm_settings(&self, rep: usize) -> HblcmSettings {
        HblcmSettings {
            gibbs: GibbsSettings {
                n_chains: self.hblcm.n_chains,
                burn_in: self.hblcm.burn_in,
                n_keep: self.hblcm.n_keep,
                thin: self.hblcm.thin,
                seed: self.seed + rep as u64,
                constraint_mode: ConstraintMode::Reject,
                cap: None,
            },
            adapt: AdaptSettings {
                adapt_sweeps: self.hblcm.adapt_sweeps,
                window: self.hblcm.window,
                target: self.hblcm.target,
                kappa: self.hblcm.kappa,
            },
            mode: if self.hblcm.paper_literal_ratio {
                MhMode::PaperLiteral
            } else {
                MhMode::FullPosterior
            },
            theta_ordering: self.hblcm.theta_ordering,
            keep_draws: false,
        }
    }

    pub fn mean_mapping(&self) -> HyperMeanMapping {
        if self.hblcm.means_as_printed {
            HyperMeanMapping::AsPrinted
        } else {
            HyperMeanMapping::Corrected
        }
    }
}
