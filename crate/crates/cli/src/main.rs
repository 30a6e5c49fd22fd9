//! `survrisk`: command-line pipeline for survival risk models.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 when a
//! model fails numerically.

mod artifact;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use survrisk::coxph::Ties;
use survrisk::tuning::Sampler;
use survrisk::{Error, Result};

use artifact::{ModelArtifact, Outputs};
use commands::SpecSource;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "survrisk", version, about = "Survival risk modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// One-hot categories rarer than this fraction are dropped.
    #[arg(long)]
    rare_threshold: Option<f64>,
    /// Risk horizon in years.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    bootstrap_rounds: Option<usize>,
    #[arg(long, value_enum)]
    ties: Option<TiesArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TiesArg {
    Breslow,
    Efron,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Tpe,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Weibull proportional-hazards cohort.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of subjects.
        #[arg(long)]
        n: Option<usize>,
        /// Target fraction of subjects with an event during follow-up.
        #[arg(long)]
        prevalence: Option<f64>,
        /// True log hazard ratios, one feature each (comma separated).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        log_hr: Option<Vec<f64>>,
        /// Log hazard ratio of the x0*x1 interaction.
        #[arg(long, allow_hyphen_values = true)]
        interaction: Option<f64>,
        #[arg(long)]
        missing_rate: Option<f64>,
        #[arg(long)]
        preexisting_rate: Option<f64>,
        /// Add categorical, ordinal and event-date columns.
        #[arg(long)]
        auxiliary: bool,
    },
    /// Fit a Cox model and evaluate it on the held-out split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fit on train + validation.
        #[arg(long = "final")]
        final_fit: bool,
    },
    /// Univariate screen plus backward elimination.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        drop_tolerance: Option<f64>,
        #[arg(long = "final")]
        final_fit: bool,
    },
    /// Cross-validated hyperparameter search for the neural model.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Number of new trials.
        #[arg(long)]
        budget: Option<usize>,
        /// Cross-validation folds.
        #[arg(long)]
        k: Option<usize>,
        /// Continue from the existing trial history.
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum, default_value = "tpe")]
        sampler: SamplerArg,
    },
    /// Train a neural survival model.
    TrainNn {
        #[command(flatten)]
        common: Common,
        /// Network spec as JSON.
        #[arg(long, conflicts_with = "trials")]
        spec: Option<PathBuf>,
        /// Use the best trial of a tuning history.
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long = "final")]
        final_fit: bool,
    },
    /// Calibration of horizon risks on the test split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Print the horizon risk of one subject given in raw units.
    Score {
        #[arg(long)]
        model: PathBuf,
        /// JSON object mapping feature names to values.
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
    },
    /// Concordance of a saved model on every split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
}

/// Starts from `base` (or the `--config` file when given) and applies the
/// flags.
fn resolve(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(Some(path))?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = common.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(test_fraction, validation_fraction, rare_threshold, horizon, bootstrap_rounds, seed);
    if common.cohort.is_some() {
        cfg.cohort = common.cohort.clone();
    }
    if common.schema.is_some() {
        cfg.schema = common.schema.clone();
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(ties) = common.ties {
        cfg.cox.ties = match ties {
            TiesArg::Breslow => Ties::Breslow,
            TiesArg::Efron => Ties::Efron,
        };
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read model {}: {io}", path.display())),
        other => other,
    })
}

fn run(cli: Cli, out: &mut Outputs) -> Result<()> {
    match cli.command {
        Command::Synth { common, n, prevalence, log_hr, interaction, missing_rate, preexisting_rate, auxiliary } => {
            let mut cfg = resolve(&common, None)?;
            let s = &mut cfg.synth;
            if let Some(seed) = common.seed {
                s.seed = seed;
            }
            s.n_subjects = n.unwrap_or(s.n_subjects);
            s.target_prevalence = prevalence.unwrap_or(s.target_prevalence);
            s.true_log_hr = log_hr.unwrap_or(std::mem::take(&mut s.true_log_hr));
            s.interaction_log_hr = interaction.unwrap_or(s.interaction_log_hr);
            s.missing_rate = missing_rate.unwrap_or(s.missing_rate);
            s.preexisting_rate = preexisting_rate.unwrap_or(s.preexisting_rate);
            s.auxiliary_columns |= auxiliary;
            commands::synth(&cfg, out)
        }
        Command::Train { common, final_fit } => commands::train_cox(&resolve(&common, None)?, final_fit, out),
        Command::Select { common, alpha, drop_tolerance, final_fit } => {
            let mut cfg = resolve(&common, None)?;
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.drop_tolerance = drop_tolerance.unwrap_or(cfg.drop_tolerance);
            commands::select(&cfg, final_fit, out)
        }
        Command::Tune { common, budget, k, resume, sampler } => {
            let mut cfg = resolve(&common, None)?;
            cfg.budget = budget.unwrap_or(cfg.budget);
            cfg.k = k.unwrap_or(cfg.k);
            let sampler = match sampler {
                SamplerArg::Tpe => Sampler::Tpe,
                SamplerArg::Random => Sampler::Random,
            };
            commands::tune(&cfg, resume, sampler)
        }
        Command::TrainNn { common, spec, trials, final_fit } => {
            let cfg = resolve(&common, None)?;
            let source = match (spec, trials) {
                (Some(p), _) => SpecSource::File(p),
                (None, Some(p)) => SpecSource::BestTrial(p),
                (None, None) => SpecSource::Config,
            };
            commands::train_nn(&cfg, &source, final_fit, out)
        }
        Command::Calibrate { common, model, bins } => {
            let artifact = load_model(&model)?;
            let mut cfg = resolve(&common, Some(artifact.config.clone()))?;
            cfg.n_bins = bins.unwrap_or(cfg.n_bins);
            commands::calibrate(&cfg, &model, &artifact, out)
        }
        Command::Score { model, features, horizon } => {
            let artifact = load_model(&model)?;
            println!("{:.6}", commands::score(&artifact, &features, horizon)?);
            Ok(())
        }
        Command::Evaluate { common, model } => {
            let artifact = load_model(&model)?;
            let cfg = resolve(&common, Some(artifact.config.clone()))?;
            commands::evaluate(&cfg, &model, &artifact, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = Outputs::default();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.remove_all();
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 3 })
        }
    }
}
