use nalgebra::{DMatrix, DVector};

use super::bound::Stats;
use super::OmgpModel;
use crate::error::{Error, Result};
use crate::gp::{condition, kernel_matrix, mean_vector, FactoredGaussian, GaussianPosterior};
use crate::stats::log_sum_exp;

impl OmgpModel {
    /// Predictive distribution of every component at `xs`, including the
    /// observation noise on the diagonal.
    pub fn predict(&self, xs: &[f64]) -> Result<Vec<GaussianPosterior>> {
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("prediction inputs must be finite"));
        }
        let groups = self.groups();
        let sigma2 = self.noise_sd * self.noise_sd;
        (0..self.k())
            .map(|k| {
                let c = &self.components[k];
                let st = Stats::new(&groups, &self.y, |i| self.resp(i, k));
                let noise = DVector::from_iterator(groups.len(), st.weight.iter().map(|w| sigma2 / w));
                let mut post = condition(
                    &mean_vector(&c.mean, &groups.xs),
                    &mean_vector(&c.mean, xs),
                    &kernel_matrix(&c.kernel, &groups.xs, &groups.xs)?,
                    &kernel_matrix(&c.kernel, xs, &groups.xs)?,
                    &kernel_matrix(&c.kernel, xs, xs)?,
                    &noise,
                    &st.ybar,
                )
                .map_err(|e| e.in_component(k))?;
                post.add_noise(sigma2);
                Ok(post)
            })
            .collect()
    }

    /// Most responsible component per training point; ties go to the
    /// lowest index.
    pub fn map_train_labels(&self) -> Vec<usize> {
        let k = self.k();
        (0..self.n())
            .map(|i| argmax(&self.responsibilities[i * k..(i + 1) * k]))
            .collect()
    }

    pub fn scorer(&self, xs: &[f64]) -> Result<Scorer> {
        let comps = self
            .predict(xs)?
            .iter()
            .enumerate()
            .map(|(k, p)| FactoredGaussian::new(p).map_err(|e| e.in_component(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Scorer {
            xs: xs.to_vec(),
            log_weight: -(self.k() as f64).ln(),
            comps,
        })
    }

    /// Component label for a new observed record and the normalised
    /// log posterior over components.
    pub fn classify_new(&self, xs: &[f64], ys: &[f64]) -> Result<(usize, Vec<f64>)> {
        self.scorer(xs)?.classify(ys)
    }

    /// `log sum_k (1/K) N(y* | mu*_k, S*_k)`.
    pub fn log_evidence(&self, xs: &[f64], ys: &[f64]) -> Result<f64> {
        self.scorer(xs)?.log_evidence(ys)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-component predictive densities on a fixed grid, factorised once for
/// scoring many records.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub xs: Vec<f64>,
    log_weight: f64,
    comps: Vec<FactoredGaussian>,
}

impl Scorer {
    pub fn k(&self) -> usize {
        self.comps.len()
    }

    pub fn log_densities(&self, ys: &[f64]) -> Result<Vec<f64>> {
        if ys.len() != self.xs.len() {
            return Err(Error::input(format!(
                "record has {} values for {} inputs",
                ys.len(),
                self.xs.len()
            )));
        }
        let y = DVector::from_column_slice(ys);
        self.comps.iter().map(|c| c.log_density(&y)).collect()
    }

    pub fn log_evidence(&self, ys: &[f64]) -> Result<f64> {
        let terms = self.log_densities(ys)?;
        Ok(self.combine(&terms))
    }

    pub(crate) fn combine(&self, log_densities: &[f64]) -> f64 {
        let weighted: Vec<f64> = log_densities.iter().map(|l| l + self.log_weight).collect();
        let value = log_sum_exp(&weighted);
        let max = log_densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(
            !value.is_finite() || (value >= max + self.log_weight - 1e-9 && value <= max + 1e-9),
            "mixture sandwich violated"
        );
        value
    }

    pub fn classify(&self, ys: &[f64]) -> Result<(usize, Vec<f64>)> {
        let terms: Vec<f64> = self.log_densities(ys)?.iter().map(|l| l + self.log_weight).collect();
        let lse = log_sum_exp(&terms);
        let post: Vec<f64> = terms.iter().map(|t| t - lse).collect();
        Ok((argmax(&post), post))
    }

    /// Lower Cholesky factors of the predictive covariances, for sampling.
    pub fn factors(&self) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        self.comps.iter().map(|c| (c.mean.clone(), c.factor())).collect()
    }
}
