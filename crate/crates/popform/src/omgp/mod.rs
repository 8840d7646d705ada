//! Overlapping mixture of Gaussian processes.
//!
//! K latent functions share the inputs; every observation belongs to one of
//! them, with the assignment marginalised into a responsibility matrix.
//! Fitting alternates responsibility updates (E-step) with box-constrained
//! hyperparameter updates (M-step) on a variational lower bound.

mod bound;
mod fit;
mod predict;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frf::Band;
use crate::gp::{KernelParams, MeanParams, Part, Sign};
use crate::optimizer;
use crate::stats::log_sum_exp;

use bound::{assignment_term, component_term, latent_moments, Groups, Stats, LN_2PI};

pub use fit::{fit, permutation_accuracy, RestartReport};
pub use predict::Scorer;

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn new(low: f64, high: f64) -> Self {
        Interval { low, high }
    }

    fn validate(&self, name: &str, positive: bool) -> Result<()> {
        let ok = self.low.is_finite() && self.high.is_finite() && self.low < self.high;
        if !ok || (positive && self.low <= 0.0) {
            return Err(Error::input(format!(
                "box for {name} must be finite with low < high{}: {}..{}",
                if positive { " and low > 0" } else { "" },
                self.low,
                self.high
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.low, self.high)
    }
}

/// Hyperparameter search boxes in natural units. `residue` bounds the
/// residue magnitude; the data sign is carried by [`Sign`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boxes {
    pub signal_variance: Interval,
    pub lengthscale: Interval,
    pub natural_frequency: Interval,
    pub damping_ratio: Interval,
    pub residue: Interval,
    pub noise: Interval,
}

impl Boxes {
    /// Boxes scaled to the data: amplitudes relative to the peak |y|,
    /// lengthscales to the band width, natural frequency to the band itself.
    pub fn for_data(y: &[f64], band: Band) -> Self {
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let width = band.high - band.low;
        Boxes {
            signal_variance: Interval::new((1e-3 * peak).powi(2), (0.2 * peak).powi(2)),
            lengthscale: Interval::new(0.0375 * width, 0.625 * width),
            natural_frequency: Interval::new(band.low, band.high),
            damping_ratio: Interval::new(0.005, 0.1),
            residue: Interval::new(0.005 * peak, 0.5 * peak),
            noise: Interval::new(1e-3 * peak, 0.3 * peak),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.signal_variance.validate("signal_variance", true)?;
        self.lengthscale.validate("lengthscale", true)?;
        self.natural_frequency.validate("natural_frequency", true)?;
        self.damping_ratio.validate("damping_ratio", true)?;
        if self.damping_ratio.high >= 1.0 {
            return Err(Error::input("damping box must stay below 1"));
        }
        self.residue.validate("residue", true)?;
        self.noise.validate("noise", true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub kernel: KernelParams,
    pub mean: MeanParams,
}

/// Hyperparameters of a whole mixture, used to seed a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub components: Vec<Component>,
    pub noise_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_em_iters: usize,
    pub elbo_rel_tol: f64,
    /// Alternations of the two mean-field blocks per E-step.
    pub inner_iters: usize,
    /// `None` derives boxes from the data via [`Boxes::for_data`].
    pub boxes: Option<Boxes>,
    pub seed: u64,
    pub sign: Sign,
    /// Keep sigma at its initial value.
    pub freeze_noise: bool,
    pub optimizer: optimizer::Options,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 10,
            max_em_iters: 200,
            elbo_rel_tol: 1e-6,
            inner_iters: 5,
            boxes: None,
            seed: 0,
            sign: Sign::Positive,
            freeze_noise: false,
            optimizer: optimizer::Options {
                tol: 1e-8,
                max_iter: 40,
                method: optimizer::Method::QuasiNewton,
            },
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::input("restarts must be at least 1"));
        }
        if self.max_em_iters == 0 || self.inner_iters == 0 {
            return Err(Error::input("iteration counts must be positive"));
        }
        if !(self.elbo_rel_tol > 0.0) {
            return Err(Error::input("elbo_rel_tol must be positive"));
        }
        if let Some(b) = &self.boxes {
            b.validate()?;
        }
        Ok(())
    }
}

/// A fitted (or in-progress) mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmgpModel {
    pub version: u32,
    pub part: Part,
    pub sign: Sign,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub components: Vec<Component>,
    pub noise_sd: f64,
    /// Row-major N x K.
    pub responsibilities: Vec<f64>,
    pub elbo_trace: Vec<f64>,
    pub seed: u64,
    pub boxes: Boxes,
    /// Parameters that finished exactly on a box wall in the last M-step.
    #[serde(default)]
    pub boundary_active: Vec<String>,
    /// M-steps whose optimiser failed or found no improvement.
    #[serde(default)]
    pub m_step_rejections: usize,
    #[serde(skip)]
    groups: Option<Groups>,
}

impl OmgpModel {
    /// A model with uniform responsibilities.
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        part: Part,
        components: Vec<Component>,
        noise_sd: f64,
        boxes: Boxes,
    ) -> Result<Self> {
        let k = components.len();
        let n = x.len();
        let sign = components.first().map(|c| c.mean.sign).unwrap_or(Sign::Positive);
        let model = OmgpModel {
            version: MODEL_VERSION,
            part,
            sign,
            responsibilities: vec![1.0 / k.max(1) as f64; n * k],
            x,
            y,
            components,
            noise_sd,
            elbo_trace: Vec::new(),
            seed: 0,
            boxes,
            boundary_active: Vec::new(),
            m_step_rejections: 0,
            groups: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.x.len(), self.components.len());
        if k == 0 {
            return Err(Error::input("mixture needs at least one component"));
        }
        if self.y.len() != n || n < k {
            return Err(Error::input(format!(
                "need len(x) = len(y) >= K (got {n}, {}, K = {k})",
                self.y.len()
            )));
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(Error::input("training data must be finite"));
        }
        if self.responsibilities.len() != n * k {
            return Err(Error::input("responsibility matrix has the wrong size"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return Err(Error::input("noise sd must be positive"));
        }
        for c in &self.components {
            c.kernel.validate()?;
            if c.mean.part != self.part {
                return Err(Error::input("component part differs from model part"));
            }
        }
        for i in 0..n {
            let s: f64 = self.responsibilities[i * k..(i + 1) * k].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::input(format!("responsibility row {i} sums to {s}")));
            }
        }
        self.boxes.validate()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn resp(&self, i: usize, k: usize) -> f64 {
        self.responsibilities[i * self.k() + k]
    }

    pub fn responsibility_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.k(), &self.responsibilities)
    }

    /// Replaces the responsibilities, renormalising each row.
    pub fn set_responsibilities(&mut self, r: &DMatrix<f64>) -> Result<()> {
        if r.shape() != (self.n(), self.k()) {
            return Err(Error::input("responsibility shape mismatch"));
        }
        let k = self.k();
        for i in 0..self.n() {
            let s: f64 = r.row(i).sum();
            if !(s > 0.0) || r.row(i).iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::input(format!("invalid responsibility row {i}")));
            }
            for j in 0..k {
                self.responsibilities[i * k + j] = r[(i, j)] / s;
            }
        }
        Ok(())
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            components: self.components.clone(),
            noise_sd: self.noise_sd,
        }
    }

    /// Reorders components so that new component `j` is old `order[j]`.
    pub fn permute(&mut self, order: &[usize]) -> Result<()> {
        let k = self.k();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&j| j >= k || std::mem::replace(&mut seen[j], true)) {
            return Err(Error::input("not a permutation of the components"));
        }
        self.components = order.iter().map(|&j| self.components[j]).collect();
        self.responsibilities = (0..self.n())
            .flat_map(|i| order.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.responsibilities[i * k + j])
            .collect();
        Ok(())
    }

    pub fn elbo_value(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }

    pub(crate) fn groups(&self) -> Groups {
        self.groups.clone().unwrap_or_else(|| Groups::new(&self.x))
    }

    fn ensure_groups(&mut self) {
        if self.groups.is_none() {
            self.groups = Some(Groups::new(&self.x));
        }
    }

    fn stats(&self, groups: &Groups, k: usize) -> Stats {
        Stats::new(groups, &self.y, |i| self.resp(i, k))
    }

    /// The variational lower bound at the current state.
    pub fn elbo(&self) -> Result<f64> {
        let groups = self.groups();
        let sigma2 = self.noise_sd * self.noise_sd;
        let mut total = assignment_term(&self.responsibilities, self.k());
        for (k, c) in self.components.iter().enumerate() {
            let st = self.stats(&groups, k);
            let t = component_term(&groups, &st, &c.kernel, &c.mean, sigma2, false)
                .map_err(|e| e.in_component(k))?;
            total += t.value;
        }
        Ok(total)
    }

    /// Bound contribution of each component's GP term (without the
    /// assignment prior and entropy).
    pub fn component_terms(&self) -> Result<Vec<f64>> {
        let groups = self.groups();
        let sigma2 = self.noise_sd * self.noise_sd;
        (0..self.k())
            .map(|k| {
                let c = &self.components[k];
                component_term(&groups, &self.stats(&groups, k), &c.kernel, &c.mean, sigma2, false)
                    .map(|t| t.value)
                    .map_err(|e| e.in_component(k))
            })
            .collect()
    }

    /// Posterior mean and variance of every latent function at the training
    /// inputs, indexed `[component][point]`.
    pub fn latent_at_training(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let groups = self.groups();
        let sigma2 = self.noise_sd * self.noise_sd;
        (0..self.k())
            .map(|k| {
                let c = &self.components[k];
                let t = component_term(&groups, &self.stats(&groups, k), &c.kernel, &c.mean, sigma2, false)
                    .map_err(|e| e.in_component(k))?;
                let (mu, var) = latent_moments(&t);
                Ok((
                    groups.of.iter().map(|&g| mu[g]).collect(),
                    groups.of.iter().map(|&g| var[g]).collect(),
                ))
            })
            .collect()
    }

    /// Mean-field responsibility update with hyperparameters fixed:
    /// `inner` alternations of the latent posterior and the assignment
    /// block, then one bound evaluation appended to the trace.
    pub fn e_step(&mut self, inner: usize) -> Result<f64> {
        self.ensure_groups();
        let (n, k) = (self.n(), self.k());
        let sigma2 = self.noise_sd * self.noise_sd;
        let ln_prior = -(k as f64).ln();
        let ln_norm = -0.5 * (LN_2PI + sigma2.ln());
        let mut logits = vec![0.0; n * k];
        for _ in 0..inner {
            let moments = self.latent_at_training()?;
            for i in 0..n {
                let row = &mut logits[i * k..(i + 1) * k];
                for (kk, (mu, var)) in moments.iter().enumerate() {
                    let d = self.y[i] - mu[i];
                    row[kk] = ln_prior + ln_norm - (d * d + var[i]) / (2.0 * sigma2);
                }
                let lse = log_sum_exp(row);
                for (kk, v) in row.iter().enumerate() {
                    self.responsibilities[i * k + kk] = (v - lse).exp();
                }
            }
        }
        let value = self.elbo()?;
        self.elbo_trace.push(value);
        Ok(value)
    }

    /// Responsibilities from the prior means only, a cheap starting point
    /// when hyperparameters are already informative.
    pub fn assign_from_prior_means(&mut self) {
        let (n, k) = (self.n(), self.k());
        let sigma2 = self.noise_sd * self.noise_sd;
        let mut row = vec![0.0; k];
        for i in 0..n {
            for (kk, c) in self.components.iter().enumerate() {
                let d = self.y[i] - c.mean.eval(self.x[i]);
                row[kk] = -(d * d + c.kernel.signal_variance) / (2.0 * sigma2);
            }
            let lse = log_sum_exp(&row);
            for kk in 0..k {
                self.responsibilities[i * k + kk] = (row[kk] - lse).exp();
            }
        }
    }
}
