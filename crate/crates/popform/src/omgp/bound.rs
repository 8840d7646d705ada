//! The collapsed variational bound and its gradient.
//!
//! With the latent functions integrated out for fixed responsibilities the
//! bound is a sum of one weighted GP evidence per component plus the
//! assignment prior and entropy. Training points that share an input are
//! merged into one pseudo-observation per component, which is exact and keeps
//! the matrices at grid size.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gp::{chol_jitter, JitteredCholesky, KernelParams, MeanParams};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Responsibilities below this are treated as this value inside the GP terms.
pub(crate) const RESP_FLOOR: f64 = 1e-12;

/// Distinct inputs (bitwise equality) and the group of every point.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Groups {
    pub xs: Vec<f64>,
    pub of: Vec<usize>,
}

impl Groups {
    pub fn new(x: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let mut xs: Vec<f64> = Vec::new();
        let mut of = vec![0; x.len()];
        for &i in &order {
            if xs.last().is_none_or(|l| l.to_bits() != x[i].to_bits()) {
                xs.push(x[i]);
            }
            of[i] = xs.len() - 1;
        }
        Groups { xs, of }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }
}

/// Per-group weighted sufficient statistics for one component.
#[derive(Clone, Debug)]
pub(crate) struct Stats {
    pub weight: DVector<f64>,
    pub ybar: DVector<f64>,
    pub rss: DVector<f64>,
}

impl Stats {
    pub fn new(groups: &Groups, y: &[f64], resp: impl Fn(usize) -> f64) -> Self {
        let g = groups.len();
        let mut w = DVector::zeros(g);
        let mut sy = DVector::zeros(g);
        for (i, &gi) in groups.of.iter().enumerate() {
            let p = resp(i).max(RESP_FLOOR);
            w[gi] += p;
            sy[gi] += p * y[i];
        }
        let ybar = sy.component_div(&w);
        let mut rss = DVector::zeros(g);
        for (i, &gi) in groups.of.iter().enumerate() {
            let p = resp(i).max(RESP_FLOOR);
            let d = y[i] - ybar[gi];
            rss[gi] += p * d * d;
        }
        Stats { weight: w, ybar, rss }
    }
}

/// Derivatives of one component's term with respect to
/// (ln signal variance, ln lengthscale, natural frequency, damping, residue)
/// and ln sigma.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct TermGrad {
    pub params: [f64; 5],
    pub ln_sigma: f64,
}

pub(crate) struct Term {
    pub value: f64,
    pub grad: Option<TermGrad>,
    pub kmat: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub alpha: DVector<f64>,
    pub chol: JitteredCholesky,
}

pub(crate) fn kernel_on(kernel: &KernelParams, xs: &[f64]) -> DMatrix<f64> {
    let g = xs.len();
    let mut k = DMatrix::zeros(g, g);
    for j in 0..g {
        for i in j..g {
            let v = kernel.eval(xs[i], xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// One component's contribution to the bound.
pub(crate) fn component_term(
    groups: &Groups,
    stats: &Stats,
    kernel: &KernelParams,
    mean: &MeanParams,
    sigma2: f64,
    with_grad: bool,
) -> Result<Term> {
    let g = groups.len();
    let xs = &groups.xs;
    let kmat = kernel_on(kernel, xs);
    let mut c = kmat.clone();
    for i in 0..g {
        c[(i, i)] += sigma2 / stats.weight[i];
    }
    let chol = chol_jitter(&c)?;

    let mut m = DVector::zeros(g);
    let mut dm = [DVector::zeros(g), DVector::zeros(g), DVector::zeros(g)];
    for i in 0..g {
        if with_grad {
            let (v, d) = mean.eval_grad(xs[i]);
            m[i] = v;
            for p in 0..3 {
                dm[p][i] = d[p];
            }
        } else {
            m[i] = mean.eval(xs[i]);
        }
    }
    let r = &stats.ybar - &m;
    let alpha = chol.solve(&r);

    let ln_2pi_s2 = LN_2PI + sigma2.ln();
    let mut value = 0.0;
    for i in 0..g {
        let w = stats.weight[i];
        value += -0.5 * w * ln_2pi_s2 - stats.rss[i] / (2.0 * sigma2) + 0.5 * (ln_2pi_s2 - w.ln());
    }
    value += -0.5 * r.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * g as f64 * LN_2PI;

    let grad = if with_grad {
        let ka = &kmat * &alpha;
        let tr_ck = chol.solve_mat(&kmat).trace();
        let d_ln_sf2 = 0.5 * alpha.dot(&ka) - 0.5 * tr_ck;

        let ell2 = kernel.lengthscale * kernel.lengthscale;
        let dk_ell = DMatrix::from_fn(g, g, |i, j| {
            let d = xs[i] - xs[j];
            kmat[(i, j)] * d * d / ell2
        });
        let d_ln_ell = 0.5 * alpha.dot(&(&dk_ell * &alpha)) - 0.5 * chol.solve_mat(&dk_ell).trace();

        let mut d_sigma = 0.0;
        let mut a_d_a = 0.0;
        for i in 0..g {
            let w = stats.weight[i];
            d_sigma += -w + stats.rss[i] / sigma2 + 1.0;
            a_d_a += alpha[i] * alpha[i] * sigma2 / w;
        }
        // tr(C^-1 D) = G - tr(C^-1 K) up to the jitter term
        let tr_cd = g as f64 - tr_ck;
        d_sigma += a_d_a - tr_cd;

        Some(TermGrad {
            params: [
                d_ln_sf2,
                d_ln_ell,
                alpha.dot(&dm[0]),
                alpha.dot(&dm[1]),
                alpha.dot(&dm[2]),
            ],
            ln_sigma: d_sigma,
        })
    } else {
        None
    };

    Ok(Term {
        value,
        grad,
        kmat,
        mean: m,
        alpha,
        chol,
    })
}

/// Posterior mean and marginal variance of the latent function at the groups.
pub(crate) fn latent_moments(term: &Term) -> (DVector<f64>, DVector<f64>) {
    let mu = &term.mean + &term.kmat * &term.alpha;
    let v = term.chol.solve_lower(&term.kmat);
    let g = term.kmat.nrows();
    let var = DVector::from_fn(g, |j, _| {
        let col = v.column(j);
        (term.kmat[(j, j)] - col.norm_squared()).max(0.0)
    });
    (mu, var)
}

/// `sum_ik r_ik (ln prior - ln r_ik)` with `0 ln 0 = 0`.
pub(crate) fn assignment_term(resp: &[f64], k: usize) -> f64 {
    let ln_prior = -(k as f64).ln();
    resp.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (ln_prior - p.ln()))
        .sum()
}
