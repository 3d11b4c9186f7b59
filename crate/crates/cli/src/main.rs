//! `bctlab` — drive the compatibility lab from experiment configs: generate
//! data, train model versions (independent, influence-tied, or chained),
//! extract feature stores, build galleries, and produce evaluation,
//! compatibility, and backfill-sweep reports.
//!
//! Every command reads one JSON config and prints one JSON envelope on
//! stdout; failures exit 1 with `{"ok":false,"error":{kind,message}}`.

mod commands;
mod config;
mod error;
mod protocol;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "bctlab", version, about = "Backward-compatible embedding lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON); required by every command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory artifacts are written into.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset described by the `spec` section.
    Gen,
    /// Train one model version from the `train` section.
    Train,
    /// Train a sequence of versions, each tied to its predecessor.
    Chain,
    /// Extract every dataset sample through a checkpoint into a feature store.
    Extract,
    /// Build a prototype gallery, optionally partially backfilled.
    Index,
    /// Produce a search or verification report.
    Eval,
    /// Compare old/new/paragon stores and print verdicts and update gains.
    Compat,
    /// Sweep gallery backfill fractions and write the accuracy curve as CSV.
    BackfillSweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Chain => "chain",
            Command::Extract => "extract",
            Command::Index => "index",
            Command::Eval => "eval",
            Command::Compat => "compat",
            Command::BackfillSweep => "backfill-sweep",
        }
    }
}

#[derive(serde::Serialize)]
struct Envelope {
    ok: bool,
    command: &'static str,
    config_hash: String,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<serde_json::Value>,
}

fn run(cli: &Cli) -> Result<Envelope> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let (cfg, hash) = ExperimentConfig::load(config_path, cli.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    let outcome = match cli.command {
        Command::Gen => commands::gen(&cfg, &hash, &cli.out)?,
        Command::Train => commands::train(&cfg, &hash, &cli.out)?,
        Command::Chain => commands::chain(&cfg, &hash, &cli.out)?,
        Command::Extract => commands::extract(&cfg, &hash, &cli.out)?,
        Command::Index => commands::index(&cfg, &hash, &cli.out)?,
        Command::Eval => commands::eval(&cfg, &hash, &cli.out)?,
        Command::Compat => commands::compat(&cfg, &hash, &cli.out)?,
        Command::BackfillSweep => commands::backfill_sweep(&cfg, &hash, &cli.out)?,
    };
    Ok(Envelope {
        ok: true,
        command: cli.command.name(),
        config_hash: hash,
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        summary: outcome.summary,
    })
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(envelope) => {
            println!("{}", serde_json::to_string(&envelope).expect("envelope serializes"));
        }
        Err(err) => {
            let payload = serde_json::json!({
                "ok": false,
                "error": { "kind": err.kind(), "message": err.to_string() },
            });
            println!("{payload}");
            std::process::exit(1);
        }
    }
}
