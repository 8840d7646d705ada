use std::fs;
use std::path::{Path, PathBuf};

use popform::frf::{default_population, inject_noise, synthesize_population};
use popform::io::{atomic_write, dataset_csv, read_dataset_csv, read_json, read_specs, to_json_bytes};
use popform::novelty::{damage_sweep, fit_form, magnitude_band, mc_threshold, Summary};
use popform::omgp::{permutation_accuracy, RestartReport};
use popform::rng::{child_seed, streams};
use popform::{frf, BladeSpec, FormPair, FrfDataset, FrfRecord, NoveltyReport, SweepResult, Threshold};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stamp};
use crate::error::CliError;
use crate::plot;

type Result<T> = std::result::Result<T, CliError>;

/// How a successful command ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Inlying,
    Outlying,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Outlying => 1,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub command: String,
    /// Output file name and SHA-256 of its bytes.
    pub files: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// MAP label accuracy of the real form against the source records,
    /// under the best relabelling.
    pub label_accuracy: f64,
    pub real_restarts: Vec<RestartReport>,
    pub imag_restarts: Vec<RestartReport>,
    pub form: FormPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub trials: usize,
    pub samples_per_trial: usize,
    pub threshold: Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub member: String,
    pub shift_pct: f64,
    #[serde(flatten)]
    pub summary: Summary,
    pub threshold: f64,
    pub outlier_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub threshold: f64,
    pub cells: Vec<SweepCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub record: Option<String>,
    #[serde(flatten)]
    pub report: NoveltyReport,
}

/// Collects output files and writes them atomically, remembering hashes for
/// the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(popform::Error::from)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.dir.join(name), bytes)?;
        self.files.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        eprintln!("wrote {}", self.dir.join(name).display());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &to_json_bytes(value)?)
    }

    fn finish(mut self, stamp: &Stamp, command: &str) -> Result<()> {
        let manifest = Manifest {
            stamp: stamp.clone(),
            command: command.to_string(),
            files: std::mem::take(&mut self.files),
        };
        let name = format!("{command}_manifest.json");
        atomic_write(&self.dir.join(&name), &to_json_bytes(&manifest)?)?;
        eprintln!("wrote {}", self.dir.join(name).display());
        Ok(())
    }
}

fn stamped_csv(stamp: &Stamp, body: &[u8]) -> Vec<u8> {
    let mut out = format!("# {}\n", stamp.line()).into_bytes();
    out.extend_from_slice(body);
    out
}

fn load_specs(path: Option<&Path>) -> Result<Vec<BladeSpec>> {
    match path {
        Some(p) => Ok(read_specs(p)?),
        None => Ok(default_population()),
    }
}

fn load_dataset(path: &Path, config: &RunConfig) -> Result<FrfDataset> {
    let band = config.band()?;
    let records = read_dataset_csv(path)?;
    for r in &records {
        if let Some(f) = r.frequency_hz.iter().find(|f| !band.contains(**f)) {
            return Err(CliError::Input(format!(
                "{}: frequency {f} Hz outside the configured band {}-{} Hz",
                path.display(),
                band.low,
                band.high
            )));
        }
    }
    Ok(FrfDataset::new(records, band)?)
}

fn load_form(path: &Path, config: &RunConfig) -> Result<FormFile> {
    let file: FormFile = read_json(path)?;
    file.form.validate()?;
    let band = config.band()?;
    if file.form.band != band {
        return Err(CliError::Input(format!(
            "form band {}-{} Hz differs from the configured band {}-{} Hz",
            file.form.band.low, file.form.band.high, band.low, band.high
        )));
    }
    Ok(file)
}

/// Clean records, `copies_train` noisy replicas of each, and the specs used.
pub fn synth(config: &RunConfig, specs: Option<&Path>, out_dir: &Path) -> Result<Outcome> {
    let stamp = Stamp::new(config);
    let specs = load_specs(specs)?;
    let clean = synthesize_population(&specs, config.band()?, config.grid_size)?;
    let mut noisy: Vec<FrfRecord> = Vec::with_capacity(specs.len() * config.copies_train);
    for (i, r) in clean.records.iter().enumerate() {
        let seed = child_seed(config.seed, streams::SYNTH_NOISE, i as u64);
        noisy.extend(inject_noise(r, config.noise_fraction, config.copies_train, seed)?);
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("clean.csv", &stamped_csv(&stamp, &dataset_csv(&clean.records)?))?;
    out.write("noisy.csv", &stamped_csv(&stamp, &dataset_csv(&noisy)?))?;
    out.json("specs.json", &specs)?;
    out.finish(&stamp, "synth")?;
    Ok(Outcome::Done)
}

/// Fits the real form, then the imaginary form seeded from it. `data` is the
/// clean dataset; noisy training points are drawn here.
pub fn fit(config: &RunConfig, data: &Path, out_dir: &Path) -> Result<Outcome> {
    let stamp = Stamp::new(config);
    let dataset = load_dataset(data, config)?;
    let training = frf::build_training_set(
        &dataset,
        config.copies_train,
        config.noise_fraction,
        config.n_train,
        config.seed,
    )?;
    let fitted = fit_form(&training, config.band()?, config.k, &config.fit_config())?;
    let label_accuracy = permutation_accuracy(&fitted.form.real.map_train_labels(), &training.source, config.k);
    for r in fitted.real_reports.iter().chain(&fitted.imag_reports) {
        if let Some(e) = &r.error {
            eprintln!("restart {} failed: {e}", r.restart);
        }
    }
    eprintln!("label accuracy {label_accuracy:.4}");
    let file = FormFile {
        stamp: stamp.clone(),
        label_accuracy,
        real_restarts: fitted.real_reports,
        imag_restarts: fitted.imag_reports,
        form: fitted.form,
    };
    let mut out = Outputs::new(out_dir)?;
    out.json("form.json", &file)?;
    out.finish(&stamp, "fit")?;
    Ok(Outcome::Done)
}

fn histogram_csv(stamp: &Stamp, values: &[f64], bins: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut s = format!("# {}\nbin_low,bin_high,count\n", stamp.line());
    for (i, c) in counts.iter().enumerate() {
        let a = lo + width * i as f64;
        s.push_str(&format!("{},{},{c}\n", a, a + width));
    }
    s.into_bytes()
}

pub fn threshold(config: &RunConfig, form: &Path, data: &Path, out_dir: &Path) -> Result<Outcome> {
    let stamp = Stamp::new(config);
    let form = load_form(form, config)?.form;
    let dataset = load_dataset(data, config)?;
    let cal = mc_threshold(
        &form,
        &dataset,
        config.threshold_samples,
        config.threshold_trials,
        config.confidence,
        config.noise_fraction,
        config.seed,
    )?;
    eprintln!(
        "threshold {} (mean {} + {} x std {})",
        cal.threshold.value, cal.threshold.mean, cal.threshold.multiplier, cal.threshold.std
    );
    let mut out = Outputs::new(out_dir)?;
    out.json(
        "threshold.json",
        &ThresholdFile {
            stamp: stamp.clone(),
            trials: cal.trials,
            samples_per_trial: cal.samples_per_trial,
            threshold: cal.threshold,
        },
    )?;
    out.write("threshold_hist.csv", &histogram_csv(&stamp, &cal.indices, 50))?;
    out.finish(&stamp, "threshold")?;
    Ok(Outcome::Done)
}

fn sweep_csv(stamp: &Stamp, sweep: &[SweepResult]) -> Vec<u8> {
    let mut s = format!("# {}\nmember,shift_pct,replica,index\n", stamp.line());
    for cell in sweep {
        for (i, v) in cell.indices.iter().enumerate() {
            s.push_str(&format!("{},{},{i},{v}\n", cell.member_id, cell.shift_pct));
        }
    }
    s.into_bytes()
}

fn band_csv(stamp: &Stamp, band: &popform::novelty::MagnitudeBand) -> Vec<u8> {
    let mut s = format!("# {}\ncomponent,frequency_hz,mean,lower,upper\n", stamp.line());
    for (k, c) in band.components.iter().enumerate() {
        for j in 0..band.grid.len() {
            s.push_str(&format!("{k},{},{},{},{}\n", band.grid[j], c.mean[j], c.lower[j], c.upper[j]));
        }
    }
    s.into_bytes()
}

/// File-name-safe form of a member id.
fn slug(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn sweep(
    config: &RunConfig,
    form: &Path,
    specs: Option<&Path>,
    threshold: &Path,
    out_dir: &Path,
) -> Result<Outcome> {
    let stamp = Stamp::new(config);
    let threshold: ThresholdFile = read_json(threshold)?;
    let form = load_form(form, config)?.form;
    let specs = load_specs(specs)?;
    let grid = config.grid()?;
    let t = threshold.threshold.value;
    let sweep = damage_sweep(
        &form,
        &specs,
        &config.sweep_pct,
        &grid,
        config.copies_test,
        config.noise_fraction,
        config.seed,
    )?;
    let cells = sweep
        .iter()
        .map(|c| SweepCell {
            member: c.member_id.clone(),
            shift_pct: c.shift_pct,
            summary: c.summary,
            threshold: t,
            outlier_rate: c.outlier_rate(t),
        })
        .collect();
    let band = magnitude_band(&form, &grid, config.band_samples, config.seed)?;
    let clean = synthesize_population(&specs, config.band()?, config.grid_size)?;

    let mut out = Outputs::new(out_dir)?;
    out.write("sweep.csv", &sweep_csv(&stamp, &sweep))?;
    out.json(
        "sweep_summary.json",
        &SweepSummary {
            stamp: stamp.clone(),
            threshold: t,
            cells,
        },
    )?;
    for (m, spec) in specs.iter().enumerate() {
        let rows: Vec<&SweepResult> = sweep.iter().filter(|c| c.member == m).collect();
        let svg = plot::sweep_svg(&spec.id, &rows, t, &stamp)?;
        out.write(&format!("sweep_{}_{}.svg", m, slug(&spec.id)), svg.as_bytes())?;
    }
    out.write("band.csv", &band_csv(&stamp, &band))?;
    out.write("band.svg", plot::band_svg(&band, &clean.records, &stamp)?.as_bytes())?;
    out.finish(&stamp, "sweep")?;
    Ok(Outcome::Done)
}

/// Scores a single record; the verdict goes to stdout.
pub fn score(config: &RunConfig, form: &Path, threshold: &Path, record: &Path) -> Result<(Outcome, Verdict)> {
    let stamp = Stamp::new(config);
    let form = load_form(form, config)?.form;
    let threshold: ThresholdFile = read_json(threshold)?;
    let mut records = read_dataset_csv(record)?;
    if records.len() != 1 {
        return Err(CliError::Input(format!(
            "{}: expected one record, found {}",
            record.display(),
            records.len()
        )));
    }
    let r = records.remove(0);
    let report = form.novelty_index(&r, threshold.threshold.value)?;
    let outcome = if report.outlying { Outcome::Outlying } else { Outcome::Inlying };
    Ok((
        outcome,
        Verdict {
            stamp,
            record: r.label,
            report,
        },
    ))
}
