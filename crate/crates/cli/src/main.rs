mod commands;
mod config;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::SynthOptions;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "kickoff", version, about = "Event studies of fan-token returns and volume around football matches")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// `key = value` run configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Directory of per-asset bar CSV files
    #[arg(long, global = true)]
    bars: Option<PathBuf>,
    /// Match schedule JSON
    #[arg(long, global = true)]
    matches: Option<PathBuf>,
    /// Betting odds CSV
    #[arg(long, global = true)]
    odds: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated expectation models
    #[arg(long, global = true)]
    models: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate bar files and write regularized copies
    Ingest,
    /// Intraday study around each match window
    EventStudy,
    /// Daily study around the tournament anchor
    DailyStudy,
    /// De-vig odds and classify expectations and surprises
    ClassifyOdds,
    /// OLS and MM regressions of full-match CARs and CAVs
    Determinants,
    /// Cumulative return series and SVG chart
    Plot,
    /// Write a synthetic dataset with known abnormal effects
    Synth(SynthArgs),
    /// Markdown tables from existing results
    Report,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator spec; flags below override it
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    volume_noise: Option<f64>,
    /// Per-bar return shock, e.g. `second_half=0.5` (daily: `0..26=0.5`)
    #[arg(long = "shock", value_name = "WINDOW=VALUE")]
    shocks: Vec<String>,
    #[arg(long = "volume-shock", value_name = "WINDOW=VALUE")]
    volume_shocks: Vec<String>,
    /// Tokens with nonzero market loadings
    #[arg(long)]
    loaded: bool,
    /// Daily bars instead of minute bars
    #[arg(long)]
    daily: bool,
}

fn overrides(g: &Global) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for s in &g.set {
        let (k, v) = s.split_once('=').with_context(|| format!("--set `{s}`: expected KEY=VALUE"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let paths = [("bars", &g.bars), ("matches", &g.matches), ("odds", &g.odds), ("out", &g.out)];
    for (k, v) in paths {
        if let Some(p) = v {
            map.insert(k.into(), p.display().to_string());
        }
    }
    if let Some(s) = g.seed {
        map.insert("seed".into(), s.to_string());
    }
    if let Some(m) = &g.models {
        map.insert("models".into(), m.clone());
    }
    Ok(map)
}

fn run(cli: Cli) -> Result<()> {
    let mut map = overrides(&cli.global)?;
    match &cli.command {
        Command::EventStudy => {
            map.insert("frequency".into(), "minute".into());
        }
        Command::DailyStudy => {
            map.insert("frequency".into(), "day".into());
        }
        Command::Synth(a) if a.daily => {
            map.insert("frequency".into(), "day".into());
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.global.config.as_deref(), &map)?;
    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::EventStudy => commands::event_study(&cfg),
        Command::DailyStudy => commands::daily_study(&cfg),
        Command::ClassifyOdds => commands::classify_odds(&cfg),
        Command::Determinants => commands::determinants(&cfg),
        Command::Plot => commands::plot(&cfg),
        Command::Synth(a) => commands::synth(
            &cfg,
            &SynthOptions {
                spec: a.spec,
                events: a.events,
                noise: a.noise,
                volume_noise: a.volume_noise,
                shocks: a.shocks,
                volume_shocks: a.volume_shocks,
                loaded: a.loaded,
                daily: a.daily,
            },
        ),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
