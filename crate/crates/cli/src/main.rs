//! Command-line front end for the record-linkage engine.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use linkage_core::blcm::{run_blcm, training_prior, GibbsSettings};
use linkage_core::diagnostics::{acceptance_report, psrf_report};
use linkage_core::em::{em_fit, EmSettings};
use linkage_core::experiment::{
    formats, run_experiment, write_reports, ExperimentConfig, Profile,
};
use linkage_core::mixture::pattern_posteriors;
use linkage_core::pattern::BlockData;
use linkage_core::synth::generate;
use linkage_core::{Error, MixtureParams};

#[derive(Parser)]
#[command(
    name = "linkage",
    about = "Latent class record linkage: synthetic data, EM, Bayesian and \
             hierarchical Bayesian samplers, diagnostics, and experiments",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML); omitted fields use the
    /// selected profile's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for generated files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Scale preset used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    /// Moment-matched Beta priors from the configured elicitation.
    Elicited,
    /// Priors counted from the input's truth labels.
    Training,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic dataset as a pair CSV with a JSON sidecar.
    Synth {
        /// Generating scenario (1 homogeneous, 2 heterogeneous); defaults
        /// to the configured scenario.
        #[arg(long)]
        scenario: Option<u8>,
        /// Omits the truth column.
        #[arg(long)]
        no_truth: bool,
    },
    /// Fits the latent class mixture by EM on pooled pattern counts.
    Em {
        /// Pair CSV to fit.
        #[arg(long)]
        input: PathBuf,
    },
    /// Runs the pooled Gibbs sampler and writes chains and diagnostics.
    Blcm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = PriorArg::Elicited)]
        prior: PriorArg,
    },
    /// Runs the hierarchical sampler and writes per-block posteriors.
    Hblcm {
        #[arg(long)]
        input: PathBuf,
    },
    /// Computes convergence diagnostics for a chain CSV.
    Diag {
        /// Chain CSV (chain,draw,<params>).
        #[arg(long)]
        input: PathBuf,
    },
    /// Scores link decisions for fitted parameters against truth labels.
    Eval {
        /// Pair CSV with a truth column.
        #[arg(long)]
        input: PathBuf,
        /// JSON file with the fitted mixture parameters.
        #[arg(long)]
        params: PathBuf,
        /// Link cutoff; defaults to the configured value.
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Runs the full replication experiment and writes its reports.
    Experiment,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_profile(match cli.profile {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn read_blocks(path: &Path) -> Result<Vec<BlockData>, Error> {
    formats::read_pairs_csv(BufReader::new(File::open(path)?))
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    let out_dir = &cli.out_dir;
    fs::create_dir_all(out_dir)?;

    match &cli.command {
        Command::Synth { scenario, no_truth } => {
            let mut config = config;
            if let Some(s) = scenario {
                config.scenario = *s;
                config.validate()?;
            }
            let synth_config = config.synth_config(0);
            formats::write_pairs_csv(
                create(&out_dir.join("pairs.csv"))?,
                &synth_config,
                !no_truth,
            )?;
            let dataset = generate(&synth_config)?;
            formats::write_json(
                create(&out_dir.join("pairs.json"))?,
                &serde_json::json!({
                    "config": dataset.config,
                    "true_params": dataset.true_params,
                }),
            )?;
            println!(
                "wrote {} blocks ({} pairs) to {}",
                dataset.blocks.len(),
                dataset.blocks.iter().map(|b| b.n_pairs()).sum::<u64>(),
                out_dir.join("pairs.csv").display()
            );
        }
        Command::Em { input } => {
            let blocks = read_blocks(input)?;
            let (k, counts) = linkage_core::pattern::pool_pattern_counts(&blocks)?;
            let fit = em_fit(k, &counts, &EmSettings::default())?;
            formats::write_json(create(&out_dir.join("em.json"))?, &fit)?;
            println!(
                "em: converged={} iterations={} p_m={:.6}",
                fit.converged, fit.iterations, fit.params.p_m
            );
        }
        Command::Blcm { input, prior } => {
            let blocks = read_blocks(input)?;
            let k = blocks[0].k;
            let priors = match prior {
                PriorArg::Elicited => config.elicitation.beta_priors(k)?,
                PriorArg::Training => training_prior(&blocks)?,
            };
            let settings = GibbsSettings {
                n_chains: config.gibbs.n_chains,
                burn_in: config.gibbs.burn_in,
                n_keep: config.gibbs.n_keep,
                thin: config.gibbs.thin,
                seed: config.seed,
                ..GibbsSettings::default()
            };
            let summary = run_blcm(&blocks, &priors, &settings)?;
            formats::write_chains_csv(create(&out_dir.join("chains.csv"))?, &summary.chains)?;
            let psrf = psrf_report(&summary.chains)?;
            formats::write_diag(create(&out_dir.join("diag.txt"))?, Some(&psrf), &[])?;
            formats::write_json(create(&out_dir.join("blcm.json"))?, &summary)?;
            println!(
                "blcm: p_m={:.6} max_psrf={:.4} constraint_fallbacks={}",
                summary.mean[0],
                psrf.max(),
                summary.constraint_fallbacks
            );
        }
        Command::Hblcm { input } => {
            let blocks = read_blocks(input)?;
            let k = blocks[0].k;
            let hyper = config.elicitation.hyper_priors(k, config.mean_mapping())?;
            let result = linkage_core::hblcm::run_hblcm(&blocks, &hyper, &config.hblcm_settings(0))?;
            formats::write_block_posteriors_csv(
                create(&out_dir.join("block_posteriors.csv"))?,
                &result.blocks,
            )?;
            let acceptance = acceptance_report(&result.mh_stats, 0.2, 0.5)?;
            formats::write_diag(create(&out_dir.join("diag.txt"))?, None, &acceptance)?;
            formats::write_json(create(&out_dir.join("hblcm.json"))?, &result.mh_stats)?;
            let flagged = acceptance.iter().filter(|e| e.flagged).count();
            println!(
                "hblcm: {} blocks, {} of {} families outside the target band",
                result.blocks.len(),
                flagged,
                acceptance.len()
            );
        }
        Command::Diag { input } => {
            let chains = formats::read_chains_csv(BufReader::new(File::open(input)?))?;
            let report = psrf_report(&chains)?;
            let mut out = create(&out_dir.join("diag.txt"))?;
            formats::write_diag(&mut out, Some(&report), &[])?;
            out.flush()?;
            formats::write_diag(std::io::stdout().lock(), Some(&report), &[])?;
        }
        Command::Eval { input, params, cutoff } => {
            let blocks = read_blocks(input)?;
            let params: MixtureParams = serde_json::from_reader(BufReader::new(File::open(params)?))?;
            let cutoff = cutoff.unwrap_or(config.cutoff);
            if !(cutoff > 0.0 && cutoff <= 1.0) {
                return Err(Error::Config(format!(
                    "cutoff must be in (0,1], got {cutoff}"
                )));
            }
            let q = pattern_posteriors(params.k(), &params)?;
            let scores = vec![q; blocks.len()];
            let rates = linkage_core::experiment::error_rates(&blocks, &scores, cutoff)?;
            let mut out = create(&out_dir.join("eval.txt"))?;
            let emit = |w: &mut dyn Write| -> Result<(), Error> {
                writeln!(w, "cutoff={cutoff:.6}")?;
                writeln!(w, "links={}", rates.links)?;
                writeln!(w, "false_matches={}", rates.false_matches)?;
                writeln!(w, "false_nonmatches={}", rates.false_nonmatches)?;
                writeln!(w, "true_matches={}", rates.true_matches)?;
                writeln!(w, "true_nonmatches={}", rates.true_nonmatches)?;
                writeln!(w, "fmr={:.6}", rates.fmr())?;
                writeln!(w, "fnr={:.6}", rates.fnr())?;
                Ok(())
            };
            emit(&mut out)?;
            out.flush()?;
            emit(&mut std::io::stdout().lock())?;
        }
        Command::Experiment => {
            let report = run_experiment(&config)?;
            write_reports(&report, out_dir)?;
            println!(
                "experiment: {} replications written to {}",
                report.reps.len(),
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    // worker-count override is the only environment knob
    if let Ok(value) = std::env::var("LINKAGE_WORKERS") {
        match value.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: could not configure {n} workers: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: LINKAGE_WORKERS must be a positive integer, got {value:?}");
                return ExitCode::from(2);
            }
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
