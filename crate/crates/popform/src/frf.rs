//! Accelerance FRF synthesis, population generation and noise injection.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// One resonance. Natural frequency is stored in Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalMode {
    #[serde(rename = "fn_hz")]
    pub natural_frequency_hz: f64,
    #[serde(rename = "zeta")]
    pub damping_ratio: f64,
    pub residue: f64,
}

impl ModalMode {
    pub fn new(natural_frequency_hz: f64, damping_ratio: f64, residue: f64) -> Result<Self> {
        let mode = ModalMode {
            natural_frequency_hz,
            damping_ratio,
            residue,
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.natural_frequency_hz.is_finite() && self.natural_frequency_hz > 0.0) {
            return Err(Error::input(format!(
                "natural frequency must be positive, got {}",
                self.natural_frequency_hz
            )));
        }
        if !(self.damping_ratio > 0.0 && self.damping_ratio < 1.0) {
            return Err(Error::input(format!(
                "damping ratio must lie in (0, 1), got {}",
                self.damping_ratio
            )));
        }
        if !self.residue.is_finite() || self.residue == 0.0 {
            return Err(Error::input(format!(
                "residue must be finite and non-zero, got {}",
                self.residue
            )));
        }
        Ok(())
    }
}

/// A population member: an id and its modes in increasing frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BladeSpec {
    pub id: String,
    pub modes: Vec<ModalMode>,
}

impl BladeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::input(format!("spec '{}' has no modes", self.id)));
        }
        for m in &self.modes {
            m.validate()
                .map_err(|e| Error::input(format!("spec '{}': {e}", self.id)))?;
        }
        if self
            .modes
            .windows(2)
            .any(|w| w[1].natural_frequency_hz <= w[0].natural_frequency_hz)
        {
            return Err(Error::input(format!(
                "spec '{}': natural frequencies must be strictly increasing",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low: f64,
    pub high: f64,
}

impl Band {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && low >= 0.0 && low < high) {
            return Err(Error::input(format!("invalid band {low}..{high}")));
        }
        Ok(Band { low, high })
    }

    /// Evenly spaced grid including both ends.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![self.low];
        }
        let step = (self.high - self.low) / (n - 1) as f64;
        (0..n)
            .map(|i| if i == n - 1 { self.high } else { self.low + step * i as f64 })
            .collect()
    }

    pub fn contains(&self, f: f64) -> bool {
        let slack = 1e-9 * self.high.abs().max(1.0);
        f >= self.low - slack && f <= self.high + slack
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrfRecord {
    pub frequency_hz: Vec<f64>,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub label: Option<String>,
}

impl FrfRecord {
    pub fn from_complex(frequency_hz: Vec<f64>, values: &[Complex64], label: Option<String>) -> Self {
        FrfRecord {
            frequency_hz,
            real: values.iter().map(|c| c.re).collect(),
            imag: values.iter().map(|c| c.im).collect(),
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.frequency_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequency_hz.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frequency_hz.len();
        if n < 2 || self.real.len() != n || self.imag.len() != n {
            return Err(Error::input(format!(
                "record needs >= 2 samples of equal length (got {n}, {}, {})",
                self.real.len(),
                self.imag.len()
            )));
        }
        if self.frequency_hz.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::input("record frequencies must be finite and positive"));
        }
        if self.frequency_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("record frequencies must be strictly increasing"));
        }
        if self.real.iter().chain(&self.imag).any(|v| !v.is_finite()) {
            return Err(Error::input("record values must be finite"));
        }
        Ok(())
    }

    pub fn peak_real(&self) -> f64 {
        self.real.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn peak_imag(&self) -> f64 {
        self.imag.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.real.iter().zip(&self.imag).map(|(r, i)| r.hypot(*i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrfDataset {
    pub records: Vec<FrfRecord>,
    pub band: Band,
}

impl FrfDataset {
    pub fn new(records: Vec<FrfRecord>, band: Band) -> Result<Self> {
        let ds = FrfDataset { records, band };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            r.validate()
                .map_err(|e| Error::input(format!("record {i}: {e}")))?;
            if r.frequency_hz.iter().any(|f| !self.band.contains(*f)) {
                return Err(Error::input(format!(
                    "record {i} extends outside band {}..{}",
                    self.band.low, self.band.high
                )));
            }
        }
        Ok(())
    }

    /// Band spanned by the records themselves.
    pub fn span(records: &[FrfRecord]) -> Result<Band> {
        let lo = records
            .iter()
            .filter_map(|r| r.frequency_hz.first().copied())
            .fold(f64::INFINITY, f64::min);
        let hi = records
            .iter()
            .filter_map(|r| r.frequency_hz.last().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        Band::new(lo, hi)
    }
}

/// Angular frequency of a value in Hz. The only Hz to rad/s conversion.
#[inline]
fn angular(f_hz: f64) -> f64 {
    TAU * f_hz
}

/// Single-mode accelerance `-w^2 A / (wn^2 - w^2 + 2i zeta w wn)`.
#[inline]
pub fn mode_response(fn_hz: f64, zeta: f64, residue: f64, f_hz: f64) -> Complex64 {
    let w = angular(f_hz);
    let wn = angular(fn_hz);
    let den = Complex64::new(wn * wn - w * w, 2.0 * zeta * w * wn);
    -(w * w * residue) / den
}

/// Single-mode response and its derivatives with respect to
/// (natural frequency in Hz, damping ratio, residue).
#[inline]
pub fn mode_response_grad(fn_hz: f64, zeta: f64, residue: f64, f_hz: f64) -> [Complex64; 4] {
    let w = angular(f_hz);
    let wn = angular(fn_hz);
    let den = Complex64::new(wn * wn - w * w, 2.0 * zeta * w * wn);
    let h = -(w * w * residue) / den;
    let ratio = h / den;
    let d_wn = Complex64::new(2.0 * wn, 2.0 * zeta * w);
    let d_fn = -ratio * d_wn * angular(1.0);
    let d_zeta = -ratio * Complex64::new(0.0, 2.0 * w * wn);
    let d_res = -(w * w) / den;
    [h, d_fn, d_zeta, d_res]
}

/// Accelerance FRF of a set of modes on a grid in Hz.
pub fn accelerance_frf(modes: &[ModalMode], freq_hz: &[f64]) -> Result<Vec<Complex64>> {
    if modes.is_empty() {
        return Err(Error::input("accelerance needs at least one mode"));
    }
    for m in modes {
        m.validate()?;
    }
    if freq_hz.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::input("frequency grid must be finite and non-negative"));
    }
    Ok(freq_hz
        .iter()
        .map(|&f| {
            modes
                .iter()
                .map(|m| mode_response(m.natural_frequency_hz, m.damping_ratio, m.residue, f))
                .sum()
        })
        .collect())
}

/// Scale every natural frequency by `1 + fraction` (e.g. -0.035 for -3.5%).
pub fn apply_frequency_shift(spec: &BladeSpec, fraction: f64) -> Result<BladeSpec> {
    if !(-0.5..=0.5).contains(&fraction) {
        return Err(Error::input(format!(
            "frequency shift {fraction} outside [-0.5, 0.5]"
        )));
    }
    let mut out = spec.clone();
    for m in &mut out.modes {
        m.natural_frequency_hz *= 1.0 + fraction;
        if m.natural_frequency_hz <= 0.0 {
            return Err(Error::input("shift produces a non-positive frequency"));
        }
    }
    Ok(out)
}

pub fn synthesize_record(spec: &BladeSpec, grid: &[f64]) -> Result<FrfRecord> {
    spec.validate()?;
    let h = accelerance_frf(&spec.modes, grid)?;
    Ok(FrfRecord::from_complex(grid.to_vec(), &h, Some(spec.id.clone())))
}

/// One clean, labelled record per spec on an even grid over `band`.
pub fn synthesize_population(specs: &[BladeSpec], band: Band, grid_size: usize) -> Result<FrfDataset> {
    if specs.is_empty() {
        return Err(Error::input("population needs at least one spec"));
    }
    if grid_size < 2 {
        return Err(Error::input("grid needs at least 2 points"));
    }
    let grid = band.grid(grid_size);
    let records = specs
        .iter()
        .map(|s| synthesize_record(s, &grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrfDataset { records, band })
}

/// Adds zero-mean Gaussian noise in place, scaled per part by that part's peak.
pub fn add_noise(record: &mut FrfRecord, sd_real: f64, sd_imag: f64, rng: &mut rng::Rng) {
    for v in &mut record.real {
        let z: f64 = rng.sample(StandardNormal);
        *v += sd_real * z;
    }
    for v in &mut record.imag {
        let z: f64 = rng.sample(StandardNormal);
        *v += sd_imag * z;
    }
}

fn noise_scales(record: &FrfRecord, fraction: f64) -> Result<(f64, f64)> {
    if !(fraction > 0.0 && fraction.is_finite()) {
        return Err(Error::input(format!("noise fraction must be positive, got {fraction}")));
    }
    let (pr, pi) = (record.peak_real(), record.peak_imag());
    if pr == 0.0 && pi == 0.0 {
        return Err(Error::input("cannot scale noise for an all-zero record"));
    }
    Ok((fraction * pr, fraction * pi))
}

/// `copies` noisy replicas of `record`, deterministic in `seed`.
pub fn inject_noise(record: &FrfRecord, fraction: f64, copies: usize, seed: u64) -> Result<Vec<FrfRecord>> {
    let mut rng = rng::stream(seed, streams::SYNTH_NOISE);
    inject_noise_with(record, fraction, copies, &mut rng)
}

pub fn inject_noise_with(
    record: &FrfRecord,
    fraction: f64,
    copies: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<FrfRecord>> {
    if copies == 0 {
        return Err(Error::input("copies must be at least 1"));
    }
    let (sr, si) = noise_scales(record, fraction)?;
    Ok((0..copies)
        .map(|_| {
            let mut r = record.clone();
            add_noise(&mut r, sr, si, rng);
            r
        })
        .collect())
}

/// Scattered training points drawn from noisy replicas of every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub x: Vec<f64>,
    pub y_real: Vec<f64>,
    pub y_imag: Vec<f64>,
    /// Index of the source record for each point.
    pub source: Vec<usize>,
}

pub fn build_training_set(
    dataset: &FrfDataset,
    copies: usize,
    fraction: f64,
    n_points: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let pool_size: usize = copies * dataset.records.iter().map(|r| r.len()).sum::<usize>();
    if n_points > pool_size {
        return Err(Error::input(format!(
            "requested {n_points} training points but the pool holds {pool_size}"
        )));
    }
    if n_points == 0 {
        return Err(Error::input("training set needs at least one point"));
    }
    let mut pool = TrainingSet {
        x: Vec::with_capacity(pool_size),
        y_real: Vec::with_capacity(pool_size),
        y_imag: Vec::with_capacity(pool_size),
        source: Vec::with_capacity(pool_size),
    };
    for (ri, record) in dataset.records.iter().enumerate() {
        let replicas = inject_noise(
            record,
            fraction,
            copies,
            rng::child_seed(seed, streams::TRAIN_NOISE, ri as u64),
        )?;
        for r in replicas {
            pool.x.extend_from_slice(&r.frequency_hz);
            pool.y_real.extend_from_slice(&r.real);
            pool.y_imag.extend_from_slice(&r.imag);
            pool.source.extend(std::iter::repeat_n(ri, r.len()));
        }
    }
    let mut rng = rng::stream(seed, streams::TRAIN_SAMPLE);
    let idx = rand::seq::index::sample(&mut rng, pool_size, n_points);
    let pick = |v: &[f64]| idx.iter().map(|i| v[i]).collect::<Vec<_>>();
    Ok(TrainingSet {
        x: pick(&pool.x),
        y_real: pick(&pool.y_real),
        y_imag: pick(&pool.y_imag),
        source: idx.iter().map(|i| pool.source[i]).collect(),
    })
}

/// The four-member population used by the defaults.
pub fn default_population() -> Vec<BladeSpec> {
    let rows = [
        ("blade1", 50.5, 0.022, 0.066),
        ("blade2", 51.8, 0.022, 0.024),
        ("blade3", 53.4, 0.020, 0.021),
        ("blade4", 55.7, 0.058, 0.104),
    ];
    rows.iter()
        .map(|&(id, f, z, a)| BladeSpec {
            id: id.to_string(),
            modes: vec![ModalMode {
                natural_frequency_hz: f,
                damping_ratio: z,
                residue: a,
            }],
        })
        .collect()
}
