//! Squared-exponential kernels, the single-mode mean function, jittered
//! Cholesky factorisation and Gaussian conditioning.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frf::{mode_response, mode_response_grad};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    /// In Hz.
    pub lengthscale: f64,
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.signal_variance) || !ok(self.lengthscale) {
            return Err(Error::input(format!(
                "kernel hyperparameters must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.lengthscale;
        self.signal_variance * (-0.5 * d * d).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Real,
    Imaginary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

/// Single-mode accelerance mean projected onto one part of the response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanParams {
    pub natural_frequency_hz: f64,
    pub damping_ratio: f64,
    pub residue: f64,
    pub part: Part,
    pub sign: Sign,
}

impl MeanParams {
    #[inline]
    pub fn eval(&self, f_hz: f64) -> f64 {
        let h = mode_response(self.natural_frequency_hz, self.damping_ratio, self.residue, f_hz);
        self.sign.value()
            * match self.part {
                Part::Real => h.re,
                Part::Imaginary => h.im,
            }
    }

    /// Value and derivatives with respect to (natural frequency, damping, residue).
    #[inline]
    pub fn eval_grad(&self, f_hz: f64) -> (f64, [f64; 3]) {
        let g = mode_response_grad(self.natural_frequency_hz, self.damping_ratio, self.residue, f_hz);
        let s = self.sign.value();
        let pick = |c: num_complex::Complex64| {
            s * match self.part {
                Part::Real => c.re,
                Part::Imaginary => c.im,
            }
        };
        (pick(g[0]), [pick(g[1]), pick(g[2]), pick(g[3])])
    }
}

pub fn kernel_matrix(params: &KernelParams, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
    params.validate()?;
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::input("kernel inputs must be finite"));
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| params.eval(a[i], b[j])))
}

pub fn mean_vector(params: &MeanParams, grid: &[f64]) -> DVector<f64> {
    DVector::from_iterator(grid.len(), grid.iter().map(|&f| params.eval(f)))
}

/// Row block size for the blocked triangular solves.
const BLOCK: usize = 48;

/// Cholesky factor together with the diagonal jitter that was needed.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `(L L^T)^{-1} b` by blocked substitution, so the bulk of the work is
    /// matrix products.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.forward(&mut x);
        // only the upper triangle of the transpose is read
        let u = self.chol.l_dirty().transpose();
        let n = u.nrows();
        let mut r1 = n;
        while r1 > 0 {
            let r0 = r1.saturating_sub(BLOCK);
            let m = r1 - r0;
            if r1 < n {
                let upd = u.view((r0, r1), (m, n - r1)) * x.rows(r1, n - r1);
                let mut xb = x.rows_mut(r0, m);
                xb -= upd;
            }
            u.view((r0, r0), (m, m)).solve_upper_triangular_mut(&mut x.rows_mut(r0, m));
            r1 = r0;
        }
        x
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.forward(&mut x);
        x
    }

    fn forward(&self, x: &mut DMatrix<f64>) {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut r0 = 0;
        while r0 < n {
            let m = BLOCK.min(n - r0);
            if r0 > 0 {
                let upd = l.view((r0, 0), (m, r0)) * x.rows(0, r0);
                let mut xb = x.rows_mut(r0, m);
                xb -= upd;
            }
            l.view((r0, r0), (m, m)).solve_lower_triangular_mut(&mut x.rows_mut(r0, m));
            r0 += m;
        }
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is non-zero")
    }
}

/// Cholesky of `m + jitter I`. Jitter starts at zero, then escalates by
/// decades from 1e-10 to 1e-4 times the mean diagonal.
pub fn chol_jitter(m: &DMatrix<f64>) -> Result<JitteredCholesky> {
    if !m.is_square() {
        return Err(Error::input("cholesky needs a square matrix"));
    }
    let n = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(JitteredCholesky { chol, jitter: 0.0 });
    }
    let diag = m.diagonal();
    let mean_diag = if n == 0 { 1.0 } else { diag.iter().map(|d| d.abs()).sum::<f64>() / n as f64 };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 1e-10 * scale;
    while jitter <= 1e-4 * scale * (1.0 + 1e-12) {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(a) {
            return Ok(JitteredCholesky { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        dim: n,
        jitter: 1e-4 * scale,
        diag_min: diag.iter().copied().fold(f64::INFINITY, f64::min),
        diag_max: diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    /// Adds `v` to every diagonal entry.
    pub fn add_noise(&mut self, v: f64) {
        for i in 0..self.dim() {
            self.cov[(i, i)] += v;
        }
    }
}

/// Gaussian conditioning with a diagonal noise term:
/// `mu = m* + K*x (Kxx + D)^-1 (y - m)`, `S = K** - K*x (Kxx + D)^-1 Kx*`.
pub fn condition(
    prior_mean_train: &DVector<f64>,
    prior_mean_test: &DVector<f64>,
    k_xx: &DMatrix<f64>,
    k_sx: &DMatrix<f64>,
    k_ss: &DMatrix<f64>,
    noise_diag: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<GaussianPosterior> {
    let n = y.len();
    let m = prior_mean_test.len();
    if prior_mean_train.len() != n
        || k_xx.shape() != (n, n)
        || k_sx.shape() != (m, n)
        || k_ss.shape() != (m, m)
        || noise_diag.len() != n
    {
        return Err(Error::input("dimension mismatch in conditioning"));
    }
    if noise_diag.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::input("noise entries must be finite and non-negative"));
    }
    if n == 0 {
        return Ok(GaussianPosterior {
            mean: prior_mean_test.clone(),
            cov: k_ss.clone(),
        });
    }
    let mut c = k_xx.clone();
    for i in 0..n {
        c[(i, i)] += noise_diag[i];
    }
    let chol = chol_jitter(&c)?;
    let alpha = chol.solve(&(y - prior_mean_train));
    let mean = prior_mean_test + k_sx * alpha;
    let v = chol.solve_lower(&k_sx.transpose());
    let mut cov = k_ss - v.transpose() * &v;
    symmetrize(&mut cov);
    Ok(GaussianPosterior { mean, cov })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A Gaussian with its covariance already factorised, for repeated scoring.
#[derive(Clone, Debug)]
pub struct FactoredGaussian {
    pub mean: DVector<f64>,
    chol: JitteredCholesky,
    log_norm: f64,
}

impl FactoredGaussian {
    pub fn new(g: &GaussianPosterior) -> Result<Self> {
        let chol = chol_jitter(&g.cov)?;
        let log_norm = -0.5 * (chol.log_det() + g.dim() as f64 * LN_2PI);
        Ok(FactoredGaussian {
            mean: g.mean.clone(),
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::input(format!(
                "dimension mismatch: {} vs {}",
                y.len(),
                self.dim()
            )));
        }
        let z = self.chol.solve_lower_vec(&(y - &self.mean));
        Ok(self.log_norm - 0.5 * z.norm_squared())
    }

    /// Lower factor of the covariance, for sampling.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// `log N(y | mu, S)` via Cholesky.
pub fn log_gaussian(y: &DVector<f64>, g: &GaussianPosterior) -> Result<f64> {
    if y.len() != g.dim() {
        return Err(Error::input("dimension mismatch in log density"));
    }
    FactoredGaussian::new(g)?.log_density(y)
}
