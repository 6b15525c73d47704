//! `sextort`: command-line front end for the measurement pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use rust_decimal::Decimal;
use sextortion::config::{Overrides, PipelineConfig};
use sextortion::fixture::{generate_fixture, write_fixture, FixtureSpec};
use sextortion::pipeline::{run_pipeline, run_stage, ErrorClass, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "sextort", version, about = "Measure extortion spam campaigns paid in bitcoin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory. `run` creates a timestamped folder inside it.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Master seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Cash-out cutoff date (YYYY-MM-DD).
    #[arg(long)]
    cutoff: Option<NaiveDate>,
    /// Suffix length in tokens used for bucketing.
    #[arg(long = "l")]
    suffix_len: Option<usize>,
    /// Jaccard merge threshold for bucketing.
    #[arg(long = "t")]
    threshold: Option<f64>,
    /// Relative widening of the ransom-amount window.
    #[arg(long = "p")]
    tolerance: Option<Decimal>,
}

#[derive(Subcommand)]
enum Command {
    /// Group the corpus into template buckets.
    Bucket(Common),
    /// Extract addresses, amounts and secrets from sextortion buckets.
    Extract(Common),
    /// Cluster the ledger and expand the seed addresses.
    Cluster(Common),
    /// Classify payments into the expanded set and total revenue.
    Filter(Common),
    /// Holding periods and onward flows of the payments.
    Trace(Common),
    /// Ransom-amount group comparison and breach matching.
    Stats(Common),
    /// Campaign linkage graph.
    Linkage(Common),
    /// Collect the stage summaries into summary.json.
    Report(Common),
    /// Every stage in order into a new timestamped folder.
    Run(Common),
    /// Write a synthetic corpus and ledger with known ground truth.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value = "fixture")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    campaigns: usize,
    #[arg(long, default_value_t = 40)]
    emails_per_campaign: usize,
    /// Corpus only, no ledger.
    #[arg(long)]
    corpus_only: bool,
}

fn load(c: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&c.config).map_err(|e| PipelineError::config(e.to_string()))?;
    let o = Overrides {
        seed: c.seed,
        cutoff: c.cutoff,
        suffix_len: c.suffix_len,
        threshold: c.threshold,
        tolerance: c.tolerance,
    };
    cfg.apply(&o).map_err(|e| PipelineError::config(e.to_string()))?;
    Ok(cfg)
}

fn stage(s: Stage, c: &Common) -> anyhow::Result<()> {
    let cfg = load(c)?;
    let summary = run_stage(s, &cfg, &c.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn fixture(a: &FixtureArgs) -> anyhow::Result<()> {
    let spec = if a.corpus_only {
        FixtureSpec::bucketing(a.campaigns, a.emails_per_campaign)
    } else {
        FixtureSpec {
            campaigns: a.campaigns,
            emails_per_campaign: a.emails_per_campaign,
            ..FixtureSpec::default()
        }
    };
    let fx = generate_fixture(&spec, a.seed).context("generating fixture")?;
    write_fixture(&fx, &a.out_dir).with_context(|| format!("writing fixture to {}", a.out_dir.display()))?;
    println!("{}", a.out_dir.join("pipeline.toml").display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Bucket(c) => stage(Stage::Bucket, &c),
        Command::Extract(c) => stage(Stage::Extract, &c),
        Command::Cluster(c) => stage(Stage::Cluster, &c),
        Command::Filter(c) => stage(Stage::Filter, &c),
        Command::Trace(c) => stage(Stage::Trace, &c),
        Command::Stats(c) => stage(Stage::Stats, &c),
        Command::Linkage(c) => stage(Stage::Linkage, &c),
        Command::Report(c) => stage(Stage::Report, &c),
        Command::Run(c) => {
            let cfg = load(&c)?;
            let outcome = run_pipeline(&cfg, &c.out_dir)?;
            println!("{}", outcome.dir.display());
            Ok(())
        }
        Command::Fixture(a) => fixture(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<PipelineError>() {
                Some(p) => p.class.exit_code(),
                None => ErrorClass::Internal.exit_code(),
            };
            ExitCode::from(code as u8)
        }
    }
}
