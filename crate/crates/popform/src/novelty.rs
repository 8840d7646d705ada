//! Damage detection with a fitted form.
//!
//! A record's novelty index is its negative log evidence under the real form
//! plus that under the imaginary form, each computed over the whole record
//! with full predictive covariances.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frf::{apply_frequency_shift, inject_noise_with, synthesize_record, Band, BladeSpec, FrfDataset, FrfRecord, TrainingSet};
use crate::gp::Part;
use crate::omgp::{fit, Boxes, FitConfig, OmgpModel, RestartReport, Scorer};
use crate::rng::{self, streams};
use crate::stats::{confidence_multiplier, log_sum_exp, mean, quantile_sorted, sorted, std_dev};

/// Real and imaginary forms of one population, with matching component order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormPair {
    pub band: Band,
    pub real: OmgpModel,
    pub imag: OmgpModel,
}

impl FormPair {
    /// Pairs two fits. The imaginary components are reordered to line up
    /// with the real ones by natural frequency.
    pub fn new(real: OmgpModel, mut imag: OmgpModel, band: Band) -> Result<Self> {
        if real.k() != imag.k() {
            return Err(Error::input(format!(
                "real form has K = {} but imaginary form has K = {}",
                real.k(),
                imag.k()
            )));
        }
        let order = match_by_frequency(&real, &imag);
        imag.permute(&order)?;
        let pair = FormPair { band, real, imag };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        self.real.validate()?;
        self.imag.validate()?;
        if self.real.part != Part::Real || self.imag.part != Part::Imaginary {
            return Err(Error::input("form pair needs a real and an imaginary model"));
        }
        if self.real.k() != self.imag.k() {
            return Err(Error::input("real and imaginary forms differ in K"));
        }
        if self.real.x.iter().chain(&self.imag.x).any(|f| !self.band.contains(*f)) {
            return Err(Error::input("training inputs fall outside the form band"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.real.k()
    }

    /// Predictive densities on `grid`, factorised for repeated scoring.
    pub fn scorer(&self, grid: &[f64]) -> Result<FormScorer> {
        if grid.is_empty() {
            return Err(Error::input("scoring grid is empty"));
        }
        if let Some(f) = grid.iter().find(|f| !self.band.contains(**f)) {
            return Err(Error::input(format!(
                "frequency {f} Hz lies outside the form band {}-{} Hz",
                self.band.low, self.band.high
            )));
        }
        Ok(FormScorer {
            real: self.real.scorer(grid)?,
            imag: self.imag.scorer(grid)?,
        })
    }

    pub fn novelty_index(&self, record: &FrfRecord, threshold: f64) -> Result<NoveltyReport> {
        record.validate()?;
        self.scorer(&record.frequency_hz)?.report(record, threshold)
    }
}

/// Sorted matching of natural frequencies, which minimises the summed
/// absolute mismatch in one dimension.
fn match_by_frequency(real: &OmgpModel, imag: &OmgpModel) -> Vec<usize> {
    let rank = |m: &OmgpModel| {
        let mut idx: Vec<usize> = (0..m.k()).collect();
        idx.sort_by(|&a, &b| {
            m.components[a]
                .mean
                .natural_frequency_hz
                .total_cmp(&m.components[b].mean.natural_frequency_hz)
        });
        idx
    };
    let (r, i) = (rank(real), rank(imag));
    let mut order = vec![0; real.k()];
    for (a, b) in r.iter().zip(&i) {
        order[*a] = *b;
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub index: f64,
    pub threshold: f64,
    pub outlying: bool,
    /// Normalised log posterior over components from both parts.
    pub per_component_log_posterior: Vec<f64>,
}

/// Both parts' scorers on one grid.
#[derive(Clone, Debug)]
pub struct FormScorer {
    pub real: Scorer,
    pub imag: Scorer,
}

impl FormScorer {
    pub fn grid(&self) -> &[f64] {
        &self.real.xs
    }

    fn check(&self, record: &FrfRecord) -> Result<()> {
        let same = record.frequency_hz.len() == self.grid().len()
            && record
                .frequency_hz
                .iter()
                .zip(self.grid())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if same {
            Ok(())
        } else {
            Err(Error::input("record grid differs from the scoring grid"))
        }
    }

    pub fn index(&self, record: &FrfRecord) -> Result<f64> {
        self.check(record)?;
        Ok(-self.real.log_evidence(&record.real)? - self.imag.log_evidence(&record.imag)?)
    }

    pub fn report(&self, record: &FrfRecord, threshold: f64) -> Result<NoveltyReport> {
        self.check(record)?;
        let re = self.real.log_densities(&record.real)?;
        let im = self.imag.log_densities(&record.imag)?;
        let index = -log_sum_exp(&weighted(&re)) - log_sum_exp(&weighted(&im));
        let joint: Vec<f64> = re.iter().zip(&im).map(|(a, b)| a + b).collect();
        let norm = log_sum_exp(&joint);
        Ok(NoveltyReport {
            index,
            threshold,
            outlying: index > threshold,
            per_component_log_posterior: joint.iter().map(|v| v - norm).collect(),
        })
    }
}

fn weighted(log_densities: &[f64]) -> Vec<f64> {
    let w = -(log_densities.len() as f64).ln();
    log_densities.iter().map(|l| l + w).collect()
}

/// Output of [`fit_form`].
#[derive(Clone, Debug)]
pub struct FormFit {
    pub form: FormPair,
    pub real_reports: Vec<RestartReport>,
    pub imag_reports: Vec<RestartReport>,
}

/// Fits the real form, then the imaginary form seeded from the real optimum.
/// Boxes not given in `config` are derived per part from the data and `band`.
pub fn fit_form(training: &TrainingSet, band: Band, k: usize, config: &FitConfig) -> Result<FormFit> {
    let part_config = |y: &[f64]| FitConfig {
        boxes: Some(config.boxes.unwrap_or_else(|| Boxes::for_data(y, band))),
        ..config.clone()
    };
    let (real, real_reports) = fit(&training.x, &training.y_real, k, Part::Real, &part_config(&training.y_real), None)?;
    let seed = real.hyperparameters();
    let (imag, imag_reports) = fit(
        &training.x,
        &training.y_imag,
        k,
        Part::Imaginary,
        &part_config(&training.y_imag),
        Some(&seed),
    )?;
    Ok(FormFit {
        form: FormPair::new(real, imag, band)?,
        real_reports,
        imag_reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub multiplier: f64,
    pub confidence: f64,
}

impl Threshold {
    /// `mean + z(confidence) * std` of the given indices.
    pub fn from_indices(indices: &[f64], confidence: f64) -> Result<Self> {
        if indices.is_empty() || indices.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("threshold needs finite indices"));
        }
        let multiplier = confidence_multiplier(confidence)?;
        let (m, s) = (mean(indices), std_dev(indices));
        Ok(Threshold {
            value: m + multiplier * s,
            mean: m,
            std: s,
            multiplier,
            confidence,
        })
    }
}

/// Indices collected for a threshold, with the pool member behind each.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub threshold: Threshold,
    pub trials: usize,
    pub samples_per_trial: usize,
    pub indices: Vec<f64>,
    pub members: Vec<usize>,
}

impl Calibration {
    pub fn member_indices(&self, member: usize) -> Vec<f64> {
        self.indices
            .iter()
            .zip(&self.members)
            .filter(|(_, m)| **m == member)
            .map(|(v, _)| *v)
            .collect()
    }
}

fn pool_scorers(form: &FormPair, pool: &FrfDataset) -> Result<Vec<FormScorer>> {
    if pool.records.is_empty() {
        return Err(Error::input("normal-condition pool is empty"));
    }
    pool.validate()?;
    pool.records.iter().map(|r| form.scorer(&r.frequency_hz)).collect()
}

/// Scores `count` normal-condition replicas: a pool member drawn uniformly,
/// with fresh noise at `fraction` of each part's peak.
fn sample_normal(
    scorers: &[FormScorer],
    pool: &FrfDataset,
    count: usize,
    fraction: f64,
    rng: &mut rng::Rng,
    indices: &mut Vec<f64>,
    members: &mut Vec<usize>,
) -> Result<()> {
    for _ in 0..count {
        let m = rng.random_range(0..pool.records.len());
        let replica = inject_noise_with(&pool.records[m], fraction, 1, rng)?.remove(0);
        indices.push(scorers[m].index(&replica)?);
        members.push(m);
    }
    Ok(())
}

/// Monte-Carlo threshold: `trials` batches of `n_samples` normal-condition
/// replicas, pooled, then `mean + z * std`.
pub fn mc_threshold(
    form: &FormPair,
    pool: &FrfDataset,
    n_samples: usize,
    trials: usize,
    confidence: f64,
    fraction: f64,
    seed: u64,
) -> Result<Calibration> {
    if n_samples == 0 || trials == 0 {
        return Err(Error::input("threshold needs at least one trial and one sample"));
    }
    confidence_multiplier(confidence)?;
    let scorers = pool_scorers(form, pool)?;
    let mut indices = Vec::with_capacity(n_samples * trials);
    let mut members = Vec::with_capacity(n_samples * trials);
    for t in 0..trials {
        let mut rng = rng::stream(rng::child_seed(seed, streams::THRESHOLD, t as u64), streams::THRESHOLD);
        sample_normal(&scorers, pool, n_samples, fraction, &mut rng, &mut indices, &mut members)?;
    }
    let threshold = Threshold::from_indices(&indices, confidence)?;
    if !(threshold.std > 0.0) {
        return Err(Error::Numerical("normal-condition indices have zero spread".into()));
    }
    Ok(Calibration {
        threshold,
        trials,
        samples_per_trial: n_samples,
        indices,
        members,
    })
}

/// Independent normal-condition replicas for checking a threshold.
pub fn holdout_indices(form: &FormPair, pool: &FrfDataset, count: usize, fraction: f64, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    let scorers = pool_scorers(form, pool)?;
    let mut rng = rng::stream(seed, streams::HOLDOUT);
    let (mut indices, mut members) = (Vec::with_capacity(count), Vec::with_capacity(count));
    sample_normal(&scorers, pool, count, fraction, &mut rng, &mut indices, &mut members)?;
    Ok((indices, members))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let s = sorted(values);
        Summary {
            mean: mean(values),
            q05: quantile_sorted(&s, 0.05),
            q50: quantile_sorted(&s, 0.5),
            q95: quantile_sorted(&s, 0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub member: usize,
    pub member_id: String,
    pub shift_pct: f64,
    pub indices: Vec<f64>,
    pub summary: Summary,
}

impl SweepResult {
    pub fn outlier_rate(&self, threshold: f64) -> f64 {
        self.indices.iter().filter(|v| **v > threshold).count() as f64 / self.indices.len() as f64
    }
}

/// The standard grid of downward shifts: 0, -0.5%, ..., -3.5%.
pub fn default_shifts_pct() -> Vec<f64> {
    vec![0.0, -0.5, -1.0, -1.5, -2.0, -2.5, -3.0, -3.5]
}

/// Shifts every member's natural frequencies by each percentage, scores
/// `copies` noisy replicas of the shifted record on `grid`, and summarises.
/// Results are ordered by member, then shift.
pub fn damage_sweep(
    form: &FormPair,
    specs: &[BladeSpec],
    shifts_pct: &[f64],
    grid: &[f64],
    copies: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<SweepResult>> {
    if specs.is_empty() || shifts_pct.is_empty() {
        return Err(Error::input("sweep needs at least one member and one shift"));
    }
    if copies == 0 {
        return Err(Error::input("sweep needs at least one copy"));
    }
    if let Some(s) = shifts_pct.iter().find(|s| !(-50.0..=0.0).contains(*s)) {
        return Err(Error::input(format!("shift {s}% outside [-50%, 0%]")));
    }
    let scorer = form.scorer(grid)?;
    let mut out = Vec::with_capacity(specs.len() * shifts_pct.len());
    for (m, spec) in specs.iter().enumerate() {
        for (s, &pct) in shifts_pct.iter().enumerate() {
            let shifted = apply_frequency_shift(spec, pct / 100.0)?;
            let clean = synthesize_record(&shifted, grid)?;
            let cell = (m * shifts_pct.len() + s) as u64;
            let mut rng = rng::stream(rng::child_seed(seed, streams::SWEEP, cell), streams::SWEEP);
            let indices = inject_noise_with(&clean, fraction, copies, &mut rng)?
                .iter()
                .map(|r| scorer.index(r))
                .collect::<Result<Vec<_>>>()?;
            out.push(SweepResult {
                member: m,
                member_id: spec.id.clone(),
                shift_pct: pct,
                summary: Summary::of(&indices),
                indices,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentBand {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeBand {
    pub grid: Vec<f64>,
    pub components: Vec<ComponentBand>,
}

/// Per component, draws real and imaginary predictive samples independently
/// and summarises `sqrt(re^2 + im^2)` by its mean and central 95% band.
pub fn magnitude_band(form: &FormPair, grid: &[f64], n_samples: usize, seed: u64) -> Result<MagnitudeBand> {
    if n_samples < 2 {
        return Err(Error::input("magnitude band needs at least 2 samples"));
    }
    let scorer = form.scorer(grid)?;
    let mut rng = rng::stream(seed, streams::BAND);
    let components = scorer
        .real
        .factors()
        .into_iter()
        .zip(scorer.imag.factors())
        .map(|(re, im)| sample_magnitude(&re, &im, n_samples, &mut rng))
        .collect();
    Ok(MagnitudeBand {
        grid: grid.to_vec(),
        components,
    })
}

fn sample_magnitude(
    re: &(DVector<f64>, DMatrix<f64>),
    im: &(DVector<f64>, DMatrix<f64>),
    n_samples: usize,
    rng: &mut rng::Rng,
) -> ComponentBand {
    let d = re.0.len();
    let mut draw = |g: &(DVector<f64>, DMatrix<f64>)| {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &g.0 + &g.1 * z
    };
    let mut samples = vec![Vec::with_capacity(n_samples); d];
    for _ in 0..n_samples {
        let a = draw(re);
        let b = draw(im);
        for j in 0..d {
            samples[j].push(a[j].hypot(b[j]));
        }
    }
    let mut band = ComponentBand {
        mean: Vec::with_capacity(d),
        lower: Vec::with_capacity(d),
        upper: Vec::with_capacity(d),
    };
    for col in &samples {
        let s = sorted(col);
        band.mean.push(mean(col));
        band.lower.push(quantile_sorted(&s, 0.025));
        band.upper.push(quantile_sorted(&s, 0.975));
    }
    band
}

#[cfg(test)]
mod tests;
