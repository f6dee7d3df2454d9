use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sbridge_core::experiment::{self, ExperimentConfig, Mode, Overrides, ResolvedConfig};

/// Discrete-time iterative Markovian fitting experiments.
#[derive(Debug, Parser)]
#[command(name = "sbridge-dimf", version)]
struct Cli {
    #[arg(value_enum)]
    mode: Mode,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_TOLERANCE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SBRIDGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if cli.jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    let overrides = Overrides { output_dir: cli.out, seed: cli.seed, threshold: cli.threshold };
    let cfg = match ExperimentConfig::load(&cli.config).and_then(|c| ResolvedConfig::resolve(cli.mode, c, overrides)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match experiment::run(&cfg, cli.jobs) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("{}: tolerance check failed; see {}", cfg.mode.as_str(), cfg.output_dir.join("summary.json").display());
                ExitCode::from(EXIT_TOLERANCE)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
