//! Batch pipeline: simulate → fit → post-process → evaluate, plus the scaled
//! simulation protocol behind `reproduce-tables`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 an estimator hit
//! its iteration limit (artifacts are still written).

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod protocol;

use clap::{Parser, Subcommand};
use config::{Method, RunConfig};
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

/// Log level comes from this variable only (`error` … `trace`).
pub const LOG_ENV: &str = "BPMM_LOG";

#[derive(Debug, Parser)]
#[command(name = "bpmm", version, about = "Dynamic brain-network estimation with covariate-guided product mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Recompute finished stages and accept artifacts from other configs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel and its ground truth.
    Simulate(Common),
    /// Estimate dynamic networks.
    Fit(Common),
    /// Change points and subgroups from fitted networks.
    Postprocess(Common),
    /// Score fitted networks against simulation truth.
    Evaluate(Common),
    /// Run the scaled simulation protocol and write the summary tables.
    ReproduceTables(Common),
    /// Print the default configuration document.
    DefaultConfig,
}

impl Common {
    /// Loads the config and applies command-line overrides.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.sim.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command and maps the outcome to an exit code.
pub fn run(cli: Cli) -> i32 {
    let common = match &cli.command {
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            return EXIT_OK;
        }
        Command::Simulate(c)
        | Command::Fit(c)
        | Command::Postprocess(c)
        | Command::Evaluate(c)
        | Command::ReproduceTables(c) => c,
    };
    let cfg = match common.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    if cfg.threads > 0 {
        // results are seed-determined, so a second initialisation attempt
        // (e.g. in tests) is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let force = common.force;
    let outcome = match &cli.command {
        Command::Simulate(_) => commands::simulate(&cfg, force),
        Command::Fit(_) => commands::fit(&cfg, force),
        Command::Postprocess(_) => commands::postprocess(&cfg, force),
        Command::Evaluate(_) => commands::evaluate(&cfg, force),
        Command::ReproduceTables(_) => commands::reproduce_tables(&cfg, force),
        Command::DefaultConfig => unreachable!(),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_NOT_CONVERGED,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}
