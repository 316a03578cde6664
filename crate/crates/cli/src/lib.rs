//! Config-driven experiment runner for the `ecfm` crate.
//!
//! A run reads one [`ExperimentConfig`], writes its artifacts under
//! `<outdir>/<subcommand>/<run-id>/` and finishes with a `run.json` manifest.
//! The run id is the first 12 hex digits of the SHA-256 of the canonical
//! config (output root excluded) and the master seed, so identical inputs
//! get the same id.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    CertifyBlock, CollapseBlock, Command, EntropyBlock, ExperimentConfig, FlowSpec, GammaBlock, GeodesicBlock, IdentityBlock, ProbeSpec,
    SequenceSpec, StabilityBlock, SweepSpec, TrainBlock, CONFIG_VERSION,
};
pub use output::Output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 1 for config errors, 2 for numerical aborts, 3 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<ecfm::Error> for CliError {
    fn from(e: ecfm::Error) -> Self {
        use ecfm::Error as E;
        match e {
            E::Invalid(_) | E::Dimension { .. } | E::TimeOutOfRange { .. } => CliError::Config(e.to_string()),
            E::NonFinite { .. } | E::DuplicatePoints | E::NoConvergence { .. } | E::Diverged { .. } => CliError::Numerical(e.to_string()),
            E::Io(_) | E::Csv(_) | E::Json(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: Command,
    pub run_id: String,
    pub config_sha256: String,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub files: Vec<String>,
    pub crate_version: String,
    pub threads: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Caps the global worker pool at `ECFM_THREADS` when set. Safe to call
/// more than once; only the first call takes effect.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ECFM_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Config(format!("ECFM_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(CliError::Config("ECFM_THREADS must be >= 1".into()));
    }
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Loads `path`, checks that it targets `command`, optionally redirects the
/// output root and runs it.
pub fn run_path(command: Command, path: &Path, outdir: Option<PathBuf>) -> Result<RunOutput, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if cfg.command != command {
        return Err(CliError::Config(format!(
            "{} is a `{}` config, not `{}`",
            path.display(),
            cfg.command.as_str(),
            command.as_str()
        )));
    }
    if let Some(o) = outdir {
        cfg.outdir = o;
    }
    run(&cfg)
}

/// Runs one experiment. The manifest is written even when the run aborts,
/// with `status = "aborted"` and the partial file list.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut out = Output::new(dir.clone());
    out.text("config.json", &format!("{}\n", serde_json::to_string_pretty(cfg).expect("config serializes")))?;
    log::info!("{} run {} -> {}", cfg.command.as_str(), cfg.run_id(), dir.display());
    let result = commands::dispatch(cfg, &mut out);
    let mut files = out.into_files();
    files.push("run.json".into());
    files.sort();
    files.dedup();
    let manifest = RunManifest {
        version: CONFIG_VERSION.to_string(),
        command: cfg.command,
        run_id: cfg.run_id(),
        config_sha256: cfg.sha256(),
        seed: cfg.seed,
        status: if result.is_ok() { "ok" } else { "aborted" }.to_string(),
        error: result.as_ref().err().map(ToString::to_string),
        files,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        threads: rayon::current_num_threads(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("run.json"), format!("{text}\n"))?;
    result.map(|()| RunOutput { dir, manifest })
}
