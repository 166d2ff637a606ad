mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hail_core::HailError;

use config::RunConfig;

/// Peer sequence encoders trained with mutual exclusivity distillation.
#[derive(Debug, Parser)]
#[command(name = "hail", version)]
struct Cli {
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build vocab.tsv and sequences.tsv from a raw event log (--data FILE).
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Input delimiter; guessed from the extension by default.
        #[arg(long)]
        format: Option<String>,
        /// Skip the first line of the log.
        #[arg(long)]
        header: bool,
    },
    /// Train peers on a prepared corpus (--data DIR); resumes from --checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Write the sampled-negative ranking report of one peer.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also report the popularity baseline.
        #[arg(long)]
        pop: bool,
    },
    /// Write the cross-peer response-consistency report.
    Consistency {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every (alpha, beta) cell of a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alphas.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        alphas: Vec<f64>,
        /// Comma-separated betas; defaults to the configured beta.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        /// Run cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Debug, Clone, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    peers: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    peer_index: Option<usize>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    fn resolve(&self) -> Result<RunConfig, HailError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| HailError::Config {
                key: kv.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("peers", self.peers.map(|v| v.to_string())),
            ("distill_mode", self.mode.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("peer_index", self.peer_index.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        log::info!("effective config:\n{}", cfg.render().trim_end());
        Ok(cfg)
    }
}

/// A failure with the process exit status it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 1, error: error.into() }
    }
}

/// Exit status for a library error: configuration 1, data 2, numeric 3.
pub fn status_of(e: &HailError) -> u8 {
    match e {
        HailError::Config { .. } => 1,
        HailError::Numeric(_) => 3,
        _ => 2,
    }
}

impl From<HailError> for Failure {
    fn from(e: HailError) -> Self {
        Failure {
            code: status_of(&e),
            error: e.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "debug" } else { "info" }))
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
