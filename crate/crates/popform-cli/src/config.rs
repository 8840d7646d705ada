use std::path::Path;

use popform::novelty::default_shifts_pct;
use popform::{Band, FitConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every knob of a run. Written into each artifact so a result can be traced
/// back to the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Frequency band in Hz, `[low, high]`.
    pub band: [f64; 2],
    pub k: usize,
    pub copies_train: usize,
    pub copies_test: usize,
    pub noise_fraction: f64,
    pub n_train: usize,
    pub restarts: usize,
    /// Downward frequency shifts in percent.
    pub sweep_pct: Vec<f64>,
    pub confidence: f64,
    pub seed: u64,
    pub grid_size: usize,
    pub threshold_trials: usize,
    pub threshold_samples: usize,
    pub band_samples: usize,
    pub freeze_noise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            band: [48.0, 56.0],
            k: 4,
            copies_train: 20,
            copies_test: 1000,
            noise_fraction: 0.05,
            n_train: 600,
            restarts: 10,
            sweep_pct: default_shifts_pct(),
            confidence: 0.99,
            seed: 0,
            grid_size: 81,
            threshold_trials: 50,
            threshold_samples: 1000,
            band_samples: 10_000,
            freeze_noise: false,
        }
    }
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub band: Option<[f64; 2]>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub copies_train: Option<usize>,
    pub copies_test: Option<usize>,
    pub noise_fraction: Option<f64>,
    pub n_train: Option<usize>,
    pub confidence: Option<f64>,
    pub sweep_pct: Option<Vec<f64>>,
}

impl RunConfig {
    /// Defaults, then the config file, then command-line values.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut c = match file {
            Some(p) => popform::io::read_json(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = o.$f.clone() { c.$f = v; })* };
        }
        take!(band, k, seed, restarts, copies_train, copies_test, noise_fraction, n_train, confidence, sweep_pct);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Input(m.to_string()));
        self.band()?;
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.copies_train == 0 || self.copies_test == 0 || self.n_train == 0 || self.restarts == 0 {
            return bad("copies, n_train and restarts must be at least 1");
        }
        if self.threshold_trials == 0 || self.threshold_samples == 0 {
            return bad("threshold trials and samples must be at least 1");
        }
        if self.grid_size < 2 || self.band_samples < 2 {
            return bad("grid_size and band_samples must be at least 2");
        }
        if !(self.noise_fraction > 0.0 && self.noise_fraction.is_finite()) {
            return bad("noise_fraction must be positive");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if self.sweep_pct.is_empty() || self.sweep_pct.iter().any(|s| !(-50.0..=0.0).contains(s)) {
            return bad("sweep shifts must be percentages in [-50, 0]");
        }
        Ok(())
    }

    pub fn band(&self) -> Result<Band, CliError> {
        Ok(Band::new(self.band[0], self.band[1])?)
    }

    pub fn grid(&self) -> Result<Vec<f64>, CliError> {
        Ok(self.band()?.grid(self.grid_size))
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            restarts: self.restarts,
            seed: self.seed,
            freeze_noise: self.freeze_noise,
            ..FitConfig::default()
        }
    }
}

/// Fields shared by every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Stamp {
    pub fn new(config: &RunConfig) -> Self {
        Stamp {
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
        }
    }

    /// One-line form for CSV and SVG comments.
    pub fn line(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash, self.seed)
    }
}
