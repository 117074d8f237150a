//! Command-line front end: argument parsing and the `simulate`, `fit`,
//! `montecarlo` and `summarize` commands.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_fit, cmd_montecarlo, cmd_simulate, cmd_summarize};
pub use config::{CommandKind, RunConfig, VariantChoice};

#[derive(Debug, Parser)]
#[command(name = "pslfm", version, about = "Propensity-score augmented latent factor models for staggered adoption")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Overrides,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one panel from the simulation design.
    Simulate,
    /// Fit a model to a panel CSV.
    Fit,
    /// Run a Monte Carlo study over simulated panels.
    Montecarlo,
    /// Merge fit directories into plot-ready tables.
    Summarize {
        /// Fit output directories.
        inputs: Vec<PathBuf>,
    },
}

/// Flags override keys of the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// pslfm, dmlfm or oracle; montecarlo also takes a comma list with
    /// `identity` and `label=path` external estimates.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Comma-separated stratum thresholds, e.g. 0.3,0.6.
    #[arg(long, global = true)]
    pub thresholds: Option<String>,
    #[arg(long, global = true)]
    pub rmax: Option<usize>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub burnin: Option<usize>,
    #[arg(long, global = true)]
    pub thin: Option<usize>,
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Pre-treatment periods held out for the placebo check.
    #[arg(long, global = true)]
    pub placebo: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Panel CSV (`unit,time,y,d,<covariates>`).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Truth CSV with true scores, for the oracle variant.
    #[arg(long, global = true)]
    pub truth: Option<PathBuf>,
    /// Any other configuration key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("seed", self.seed.map(|v| v.to_string()));
        push("variant", self.variant.clone());
        push("thresholds", self.thresholds.clone());
        push("rmax", self.rmax.map(|v| v.to_string()));
        push("iters", self.iters.map(|v| v.to_string()));
        push("burnin", self.burnin.map(|v| v.to_string()));
        push("thin", self.thin.map(|v| v.to_string()));
        push("chains", self.chains.map(|v| v.to_string()));
        push("reps", self.reps.map(|v| v.to_string()));
        push("placebo", self.placebo.map(|v| v.to_string()));
        push("out", path(&self.out));
        push("data", path(&self.data));
        push("truth", path(&self.truth));
        out.extend(config::parse_pairs(&self.set.join("\n"))?);
        Ok(out)
    }
}

impl Cli {
    /// Config file pairs, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut pairs = match &self.opts.config {
            Some(p) => config::read_config_file(p)?,
            None => Vec::new(),
        };
        pairs.extend(self.opts.pairs()?);
        let kind = match &self.command {
            Command::Simulate => CommandKind::Simulate,
            Command::Fit => CommandKind::Fit,
            Command::Montecarlo => CommandKind::Montecarlo,
            Command::Summarize { inputs } => {
                if !inputs.is_empty() {
                    let joined: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
                    pairs.push(("inputs".into(), joined.join(",")));
                }
                CommandKind::Summarize
            }
        };
        RunConfig::from_pairs(kind, &pairs)
    }
}

pub fn run(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match cfg.command {
        CommandKind::Simulate => cmd_simulate(cfg),
        CommandKind::Fit => cmd_fit(cfg),
        CommandKind::Montecarlo => cmd_montecarlo(cfg),
        CommandKind::Summarize => cmd_summarize(cfg),
    }
}
