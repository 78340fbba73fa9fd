use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hypermarg::runner::{self, summarize};

#[derive(Parser)]
#[command(name = "hypermarg", version, about = "Marginalization sweeps for small neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (fold, method) cell of a config and write CSV results.
    Run {
        config: PathBuf,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; overrides `[run] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; overrides `[run] threads`.
        #[arg(long)]
        threads: Option<usize>,
        /// Record failed cells and keep going.
        #[arg(long)]
        skip_failures: bool,
    },
    /// Parse and check a config without training anything.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<runner::ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    runner::parse_config(&text).with_context(|| format!("in {}", path.display()))
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

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "ok: {} method(s), {} epochs, output to {}",
                cfg.sweep.len(),
                cfg.epochs,
                cfg.output_dir.display()
            );
        }
        Command::Run {
            config,
            out,
            seed,
            threads,
            skip_failures,
        } => {
            let mut cfg = load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if threads.is_some() {
                cfg.threads = threads;
            }
            cfg.skip_failures |= skip_failures;

            let results = runner::run_experiment(&cfg)?;
            runner::write_results(&results, &cfg.output_dir)
                .with_context(|| format!("writing results to {}", cfg.output_dir.display()))?;
            for s in summarize(&results.raw) {
                println!(
                    "{:<10} {:<24} nll {:>9.4} ± {:.4}  metric {:>9.4} ± {:.4}",
                    s.dataset, s.method, s.nll_mean, s.nll_std, s.metric_mean, s.metric_std
                );
            }
            if !results.failures.is_empty() {
                eprintln!("{} cell(s) failed; see failures.csv", results.failures.len());
            }
        }
    }
    Ok(())
}
