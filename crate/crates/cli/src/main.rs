//! `moe`: synthetic data, MAP training, Laplace fitting, evaluation,
//! layer-quarter ablation and multi-seed reproduction runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_laplace::Error;

#[derive(Parser)]
#[command(
    name = "moe",
    version,
    about = "Kronecker-factored Laplace posteriors for mixture-of-experts models"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON experiment config. Missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root that the configured data, checkpoint and report paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Override a config field by dotted path, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/val/test (and OOD) splits as JSONL.
    GenData,
    /// Train to a MAP point and write the model checkpoint and loss curve.
    Train,
    /// Fit the Kronecker-factored posterior and choose the prior precision.
    FitLaplace {
        /// Choose the prior precision by validation NLL instead of the evidence.
        #[arg(long, conflicts_with = "lambda_fixed")]
        lpo: bool,
        /// Skip optimization and use this prior precision.
        #[arg(long)]
        lambda_fixed: Option<f64>,
        /// Experts to treat: `all`, `none` or a comma-separated list of zero-based layers.
        #[arg(long)]
        treat: Option<String>,
    },
    /// Score MAP and Bayesian predictions on one or more splits.
    Evaluate {
        /// Splits to score; defaults to test and, when present, ood.
        #[arg(long, value_delimiter = ',')]
        split: Vec<String>,
    },
    /// Leave one layer quarter at MAP at a time and score the rest.
    Ablate {
        /// Split to score; defaults to ood when present, test otherwise.
        #[arg(long)]
        split: Option<String>,
        /// Also score the run with every expert treated.
        #[arg(long)]
        include_control: bool,
    },
    /// Run the whole pipeline over several seeds and write aggregate tables.
    Repro {
        /// Comma-separated seeds; defaults to 0..=9.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// `default` or `smoke`.
        #[arg(long, default_value = "default")]
        profile: String,
        /// Run seeds concurrently.
        #[arg(long)]
        parallel_seeds: bool,
    },
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("MOE_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::config("MOE_NUM_THREADS", format!("expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("MOE_NUM_THREADS", e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let c = &cli.common;
    match cli.command {
        Command::GenData => commands::gen_data(c),
        Command::Train => commands::train(c),
        Command::FitLaplace {
            lpo,
            lambda_fixed,
            treat,
        } => commands::fit_laplace(c, lpo, lambda_fixed, treat.as_deref()),
        Command::Evaluate { split } => commands::evaluate(c, &split),
        Command::Ablate { split, include_control } => commands::ablate(c, split.as_deref(), include_control),
        Command::Repro {
            seeds,
            profile,
            parallel_seeds,
        } => commands::repro(c, &seeds, &profile, parallel_seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
