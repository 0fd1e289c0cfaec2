//! Command-line driver for the HBM analytics simulator.

pub mod commands;
pub mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hbm_analytics::sgd::SgdPlacement;
use hbm_analytics::PlacementMode;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hbmsim", version, about = "Model and verify analytics engines on banked HBM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output CSV file, or the output directory for `report`. Defaults to
    /// stdout, and to `report/` for `report`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Engine counts to sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub engines: Vec<usize>,

    /// Data placement: partitioned or nonpartitioned for selection,
    /// replicated or nonreplicated for SGD.
    #[arg(long, global = true)]
    pub placement: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Aggregate bandwidth over active ports and address separation.
    Ubench,
    /// Range selection rate over engines, selectivity and placement.
    Select,
    /// Hash join rate over input properties and build-side size.
    Join,
    /// Hyperparameter search with per-epoch loss and modeled time.
    Sgd,
    /// All figure-shaped tables into one directory.
    Report,
}

fn apply_overrides(cli: &Cli, config: &mut RunConfig) -> anyhow::Result<()> {
    if !cli.engines.is_empty() {
        config.select.engines = cli.engines.clone();
        config.join.engines = cli.engines.clone();
        if cli.engines.len() > 1 && cli.command == Command::Sgd {
            bail!(hbm_analytics::Error::Configuration("sgd takes a single engine count".into()));
        }
        config.sgd.engines = cli.engines[0];
    }
    if let Some(p) = &cli.placement {
        match cli.command {
            Command::Select => config.select.placements = vec![p.parse::<PlacementMode>()?],
            Command::Sgd => config.sgd.placement = p.parse::<SgdPlacement>()?,
            _ => log::warn!("--placement has no effect on this subcommand"),
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    apply_overrides(cli, &mut config)?;

    if cli.command == Command::Report {
        let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("report"));
        commands::cmd_report(&config, cli.seed, &dir)?;
        log::info!("wrote report tables to {}", dir.display());
        return Ok(());
    }

    let mut out: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    match cli.command {
        Command::Ubench => commands::cmd_ubench(&config, &mut out)?,
        Command::Select => commands::cmd_select(&config, cli.seed, &mut out)?,
        Command::Join => commands::cmd_join(&config, cli.seed, &mut out)?,
        Command::Sgd => commands::cmd_sgd(&config, cli.seed, &mut out)?,
        Command::Report => unreachable!(),
    }
    out.flush()?;
    Ok(())
}

/// Process exit code for an error: usage problems map to 2, model errors
/// to their own codes.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<hbm_analytics::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}
