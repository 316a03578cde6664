use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ecfm_cli::{init_threads, run_path, Command};

/// Entropy-controlled flow matching experiments.
///
/// Each subcommand reads a TOML (or `.json`) config with
/// `version = "ecfm-config-v1"` and writes its artifacts to
/// `<outdir>/<subcommand>/<run-id>/`. Exit codes: 0 success, 1 config error,
/// 2 numerical abort, 3 I/O error. `ECFM_THREADS` caps the worker count and
/// `RUST_LOG` sets the log level.
#[derive(Parser)]
#[command(name = "ecfm", version)]
struct Cli {
    /// Experiment to run; must match the config's `command`.
    #[arg(value_enum)]
    command: Command,
    /// Path to the experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output root.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run_path(cli.command, &cli.config, cli.outdir));
    match result {
        Ok(out) => {
            println!("{}", out.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ecfm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
