//! `hoodprice`: neighborhood-aware housing price nowcasting from the
//! command line. Logs go to stderr; results go to files under `--out`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hoodprice::pipeline::{self, RunConfig, Variant};

#[derive(Parser)]
#[command(name = "hoodprice", version, about = "Nowcast housing prices from neighborhood context")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// property, full or open.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city with a known price oracle.
    Synth {
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        listings: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Load the input layers, filter listings and assign ego-places.
    Ingest,
    /// Compute per-block place features.
    Features,
    /// Aggregate features over egohoods and assemble the design matrix.
    Egohood,
    /// Assign spatial cross-validation folds.
    Folds,
    /// Train one model per rotation for the selected variant.
    Train,
    /// Compare holdout errors of every trained variant.
    Evaluate,
    /// Predict prices of listings without a price.
    Nowcast {
        /// Listings file to predict instead of the unpriced ingested ones.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Break one prediction into per-feature contributions.
    Explain {
        #[arg(long)]
        listing: String,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.load_file(p)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair).with_context(|| format!("--set {pair}"))?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.common)?;
    match cli.command {
        Command::Synth { blocks, listings, noise } => {
            if let Some(b) = blocks {
                cfg.synth.blocks = b;
            }
            if let Some(l) = listings {
                cfg.synth.listings = l;
            }
            if let Some(n) = noise {
                cfg.synth.noise_scale = n;
            }
            pipeline::run_synth(&cfg)?;
        }
        Command::Ingest => {
            pipeline::run_ingest(&cfg)?;
        }
        Command::Features => {
            pipeline::run_features(&cfg)?;
        }
        Command::Egohood => {
            pipeline::run_egohood(&cfg)?;
        }
        Command::Folds => {
            pipeline::run_folds(&cfg)?;
        }
        Command::Train => {
            pipeline::run_train(&cfg, cfg.variant)?;
        }
        Command::Evaluate => {
            pipeline::run_evaluate(&cfg)?;
            log::info!("report written to {}", pipeline::StagePaths::new(&cfg.out).report().display());
        }
        Command::Nowcast { input } => {
            pipeline::run_nowcast(&cfg, cfg.variant, input.as_deref())?;
        }
        Command::Explain { listing } => {
            let r = pipeline::run_explain(&cfg, cfg.variant, &listing)?;
            log::info!(
                "explanation of {listing} (prediction {:.2}) written to {}",
                r.prediction,
                pipeline::StagePaths::new(&cfg.out).explanation(cfg.variant, &listing).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
