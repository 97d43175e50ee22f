//! `cnd`: run or validate neighbor-discovery experiments described in TOML.
//!
//! Exit codes: 0 on success, 2 when the config (or a CLI/env override of it)
//! is invalid, 1 on any runtime failure.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use cnd_cli::batch::run_batch;
use cnd_cli::config::{ConfigError, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "cnd",
    about = "Deterministic simulator for continuous neighbor discovery in duty-cycled sensor networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment batch described by a TOML config.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Output directory for CSVs and traces.
        #[arg(long, default_value = "cnd-out")]
        out: PathBuf,
        /// Override the base trial seed (beats the CND_SEED environment
        /// variable, which beats the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the trial count per policy.
        #[arg(long)]
        trials: Option<usize>,
        /// Record a JSONL event trace per trial.
        #[arg(long)]
        trace: bool,
    },
    /// Check a config and report every problem without running anything.
    Validate {
        /// Path to the experiment config.
        config: PathBuf,
    },
}

fn main() {
    match execute(Cli::parse()) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.is::<ConfigError>() { 2 } else { 1 };
            std::process::exit(code);
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            trials,
            trace,
        } => {
            let mut cfg = ScenarioConfig::from_path(&config)?;
            if let Some(seed) = seed.or(seed_from_env()?) {
                cfg.run.seed = seed;
            }
            if let Some(trials) = trials {
                cfg.run.trials = trials;
            }
            if trace {
                cfg.run.trace = true;
            }
            let plan = cfg.build()?;
            println!("{plan}");
            let output = run_batch(&plan, &out).context("batch failed")?;
            for row in &output.rows {
                let detection = match (row.detection_fraction, row.detection_halfwidth) {
                    (Some(f), Some(h)) => format!(", detection {f:.3} +/- {h:.3}"),
                    _ => String::new(),
                };
                let latency = row
                    .mean_latency_s
                    .map(|l| format!(", mean latency {l:.2}s"))
                    .unwrap_or_default();
                println!(
                    "  {}: {} trial(s), {:.3} energy/link{}{}",
                    row.policy, row.trials, row.mean_energy_per_link, detection, latency
                );
            }
            println!("wrote {}", output.summary_path.display());
            println!("wrote {}", output.per_trial_path.display());
            if !output.trace_paths.is_empty() {
                println!(
                    "wrote {} trace file(s) under {}",
                    output.trace_paths.len(),
                    out.display()
                );
            }
            Ok(())
        }
        Command::Validate { config } => {
            let plan = ScenarioConfig::from_path(&config)?.build()?;
            println!("ok: {plan}");
            Ok(())
        }
    }
}

/// `CND_SEED` overrides the config seed; a malformed value is a config error
/// so it exits with the same code as any other invalid input.
fn seed_from_env() -> anyhow::Result<Option<u64>> {
    match std::env::var("CND_SEED") {
        Ok(raw) => {
            let seed = raw.trim().parse::<u64>().map_err(|_| {
                ConfigError::Invalid(vec![format!(
                    "CND_SEED: must be an unsigned integer, got {raw:?}"
                )])
            })?;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context("CND_SEED is not valid unicode"),
    }
}
