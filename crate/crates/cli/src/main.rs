use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serl_cli::commands::{
    inspect, run_compare, run_eval, run_train, Algo, CompareOptions, EvalRequest, TrainOptions, UsageError,
};
use serl_cli::settings::{load_settings, SettingsError};
use serl_core::EnvKind;

#[derive(Parser)]
#[command(name = "serl", version, about = "Train and evaluate SERL agents on toy text environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, checkpoints and rollouts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "serl")]
        algo: Algo,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation of a checkpoint on held-out tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid side or catalog size; defaults to the standard one.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Run GRPO and SERL side by side over several seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop each arm once eval success reaches the threshold.
        #[arg(long)]
        early_stop: bool,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
    },
    /// Pretty-print a trajectory dump.
    Inspect {
        #[arg(long)]
        trajectories: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, algo, resume } => {
            let mut settings = load_settings(&config)?;
            if let Some(seed) = seed {
                settings.config.seed = seed;
            }
            if let Some(out) = out {
                settings.out_dir = out;
            }
            settings.config = algo.apply(&settings.config);
            let outcome = run_train(&settings, &TrainOptions { resume })?;
            println!("{}", serde_json::to_string(&outcome.final_eval)?);
        }
        Command::Eval { checkpoint, env, episodes, seed, size } => {
            let summary = run_eval(&EvalRequest { checkpoint, env, episodes, seed, size })?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Compare { config, seeds, out, early_stop, threshold } => {
            let mut settings = load_settings(&config)?;
            if let Some(out) = out {
                settings.out_dir = out;
            }
            let opts = CompareOptions { threshold, stop_at_threshold: early_stop };
            let report = run_compare(&settings, &seeds, &opts)?;
            for s in &report.summary {
                let median = s.median_steps_to_threshold.map_or("n/a".to_string(), |m| m.to_string());
                println!(
                    "{}: median steps to {} = {} ({}/{} seeds reached)",
                    s.algo, s.threshold, median, s.reached, s.seeds
                );
            }
        }
        Command::Inspect { trajectories } => {
            // a closed pipe (e.g. `| head`) is not an error
            if let Err(e) = std::io::stdout().write_all(inspect(&trajectories)?.as_bytes()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<SettingsError>().is_some();
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
