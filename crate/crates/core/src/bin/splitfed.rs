//! Command-line front end: `run`, `validate` and `summarize`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splitfed::harness::{self, HarnessError};

#[derive(Parser)]
#[command(
    name = "splitfed",
    version,
    about = "Split federated LoRA fine-tuning over noisy uplinks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (mode, epsilon) cell of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides SIM_DEFAULT_SEED and the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's `out`, else `results`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute the summary of a run directory and print it.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            jobs,
        } => {
            let cfg = harness::parse_config(&config)?;
            let env = std::env::var(harness::SEED_ENV).ok();
            let seed = harness::resolve_seed(seed, env.as_deref(), cfg.seed)?;
            let out = out
                .or_else(|| cfg.out.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let report = harness::run_grid(&cfg, seed, &out, jobs)?;
            for cell in &report.manifest.cells {
                match &cell.error {
                    None => eprintln!("ok      {}", cell.file),
                    Some(e) => eprintln!("FAILED  {} after {} epochs: {e}", cell.file, cell.epochs),
                }
            }
            let failed = report.failed();
            if failed > 0 {
                return Err(HarnessError::CellsFailed {
                    failed,
                    total: report.manifest.cells.len(),
                });
            }
            eprintln!(
                "wrote {} cells to {}",
                report.manifest.cells.len(),
                out.display()
            );
            Ok(())
        }
        Command::Validate { config } => {
            harness::parse_config(&config)?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::Summarize { input } => {
            let summary = harness::summarize_dir(&input)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
