//! `tdv3`: train, evaluate and plot world-model agents on memory tasks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tdv3_core::harness::{apply_seed_override, emit_plots, evaluate, run_train, selftest, RunConfig};

#[derive(Parser)]
#[command(name = "tdv3", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a key=value config; writes metrics.csv and checkpoint.tdv3.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides TDV3_SEED and the config's schedule.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One SVG per metric, overlaying every input CSV.
    Plot {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the built-in invariant checks.
    Selftest,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            apply_seed_override(&mut cfg, seed)?;
            let s = run_train(&cfg, &out).with_context(|| format!("training run into {}", out.display()))?;
            println!(
                "env_steps={} train_steps={} episodes={}",
                s.env_steps, s.train_steps, s.episodes
            );
            if let Some(row) = &s.final_row {
                println!("final_return={:.4}", row.episode_return_mean);
            }
            println!("metrics={}", s.metrics_path.display());
            println!("checkpoint={}", s.checkpoint_path.display());
        }
        Cmd::Eval { checkpoint, episodes, seed } => {
            let r = evaluate(&checkpoint, episodes, seed)?;
            let (lo, hi) = r.ci();
            println!("episodes={} mean={:.4} ci95=[{lo:.4}, {hi:.4}]", r.episodes, r.mean);
        }
        Cmd::Plot { inputs, out } => {
            for p in emit_plots(&inputs, &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Selftest => {
            let checks = selftest();
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
