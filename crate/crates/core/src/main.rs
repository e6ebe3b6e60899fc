use std::path::PathBuf;
use std::process::ExitCode;

use axisjump::config::ExperimentConfig;
use axisjump::runner::{self, RunOptions, SuiteStatus};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "axisjump", version, about = "Run axis-jump lattice chain experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Run every config in a directory and print a summary table.
    Suite {
        dir: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Parse a config and print it with all defaults filled in.
    Resolve { config: PathBuf },
}

#[derive(Args)]
struct Overrides {
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (run) or output root (suite). Defaults to
    /// $AXISJUMP_OUTPUT/<config name>, or ./axisjump-out.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl From<Overrides> for RunOptions {
    fn from(o: Overrides) -> Self {
        RunOptions { seed: o.seed, workers: o.workers, output: o.output }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, opts } => match runner::run(&config, &opts.into()) {
            Ok(outcome) => {
                for r in &outcome.reports {
                    println!("{}", r.summary_line());
                }
                for r in outcome.failing() {
                    eprintln!("check failed: {} ({})", r.check_name, config.display());
                }
                println!("output: {}", outcome.output_dir.display());
                outcome.status()
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Suite { dir, opts } => match runner::suite(&dir, &opts.into()) {
            Ok(outcome) => {
                println!("{:<28} {:<26} status", "config", "experiment");
                for r in &outcome.rows {
                    let status = match &r.status {
                        SuiteStatus::Pass => "PASS".to_string(),
                        SuiteStatus::Fail => format!("FAIL ({})", r.failed.join(", ")),
                        SuiteStatus::Error(m) => format!("ERROR {m}"),
                    };
                    println!("{:<28} {:<26} {status}", r.config, r.experiment);
                }
                println!("output: {}", outcome.output_dir.display());
                outcome.status()
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Resolve { config } => match ExperimentConfig::load(&config).and_then(|c| c.to_toml()) {
            Ok(text) => {
                print!("{text}");
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
    };
    ExitCode::from(code as u8)
}
