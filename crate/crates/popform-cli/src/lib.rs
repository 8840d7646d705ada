//! Command-line driver: synthesise a population, fit its form, calibrate a
//! threshold, sweep simulated damage and score records.

pub mod commands;
pub mod config;
pub mod error;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::Outcome;
use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "popform", version, about = "Population forms and novelty scoring for FRF data")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Frequency band in Hz as LOW,HIGH
    #[arg(long, global = true, value_parser = parse_band)]
    pub band: Option<[f64; 2]>,
    /// Number of mixture components
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    /// Noisy copies per record: training copies for synth/fit, test copies for sweep
    #[arg(long, global = true)]
    pub copies: Option<usize>,
    /// Noise standard deviation as a fraction of each part's peak
    #[arg(long, global = true)]
    pub noise_frac: Option<f64>,
    #[arg(long, global = true)]
    pub n_train: Option<usize>,
    #[arg(long, global = true)]
    pub confidence: Option<f64>,
    /// Frequency shifts in percent, comma separated (e.g. 0,-0.5,-1)
    #[arg(long, global = true, allow_hyphen_values = true, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON file with RunConfig fields; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write clean and noisy population datasets
    Synth {
        /// Member specs (JSON); the built-in population when omitted
        #[arg(long)]
        specs: Option<PathBuf>,
    },
    /// Fit real and imaginary forms to a clean dataset
    Fit {
        #[arg(long)]
        data: PathBuf,
    },
    /// Monte-Carlo novelty threshold from normal-condition replicas
    Threshold {
        #[arg(long)]
        form: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Damage sweep with plots
    Sweep {
        #[arg(long)]
        form: PathBuf,
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long)]
        threshold: PathBuf,
    },
    /// Score one record; exit 1 when it is outlying
    Score {
        #[arg(long)]
        form: PathBuf,
        #[arg(long)]
        threshold: PathBuf,
        #[arg(long)]
        record: PathBuf,
    },
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number '{t}'")))
        .collect()
}

fn parse_band(s: &str) -> Result<[f64; 2], String> {
    match parse_list(s)?.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err("band must be LOW,HIGH".into()),
    }
}

impl Cli {
    /// Effective configuration for this invocation.
    pub fn config(&self) -> Result<RunConfig, CliError> {
        let c = &self.common;
        let test_side = matches!(self.command, Command::Sweep { .. } | Command::Threshold { .. });
        let o = Overrides {
            band: c.band,
            k: c.k,
            seed: c.seed,
            restarts: c.restarts,
            copies_train: c.copies.filter(|_| !test_side),
            copies_test: c.copies.filter(|_| test_side),
            noise_fraction: c.noise_frac,
            n_train: c.n_train,
            confidence: c.confidence,
            sweep_pct: c.sweep.clone(),
        };
        RunConfig::resolve(c.config.as_deref(), &o)
    }
}

/// Runs one command and returns its outcome.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let config = cli.config()?;
    eprintln!("config {}", serde_json::to_string(&config).expect("config serialises"));
    let out = &cli.common.out_dir;
    match &cli.command {
        Command::Synth { specs } => commands::synth(&config, specs.as_deref(), out),
        Command::Fit { data } => commands::fit(&config, data, out),
        Command::Threshold { form, data } => commands::threshold(&config, form, data, out),
        Command::Sweep { form, specs, threshold } => commands::sweep(&config, form, specs.as_deref(), threshold, out),
        Command::Score { form, threshold, record } => {
            let (outcome, verdict) = commands::score(&config, form, threshold, record)?;
            let text = popform::io::to_json_bytes(&verdict)?;
            print!("{}", String::from_utf8_lossy(&text));
            Ok(outcome)
        }
    }
}
