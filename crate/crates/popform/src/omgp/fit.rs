use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::bound::{assignment_term, component_term, Groups, Stats};
use super::{Boxes, Component, FitConfig, Hyperparameters, OmgpModel};
use crate::error::{Error, Result};
use crate::frf::Band;
use crate::gp::{KernelParams, MeanParams, Part};
use crate::optimizer::{self, Bounds, Objective};
use crate::rng::{self, streams};

/// Half-width of the logit box used for the damping ratio.
const LOGIT_LIMIT: f64 = 25.0;

const PARAM_NAMES: [&str; 5] = [
    "signal_variance",
    "lengthscale",
    "natural_frequency",
    "damping_ratio",
    "residue",
];

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Maps hyperparameters to the optimiser's coordinates:
/// per component `[ln sf2, ln ell, f_n, logit(zeta in box), ln A]`, then
/// `ln sigma` unless the noise is frozen.
struct Layout {
    k: usize,
    boxes: Boxes,
    free_noise: bool,
}

impl Layout {
    fn dim(&self) -> usize {
        5 * self.k + usize::from(self.free_noise)
    }

    fn bounds(&self) -> Bounds {
        let b = &self.boxes;
        let one = [
            (b.signal_variance.low.ln(), b.signal_variance.high.ln()),
            (b.lengthscale.low.ln(), b.lengthscale.high.ln()),
            (b.natural_frequency.low, b.natural_frequency.high),
            (-LOGIT_LIMIT, LOGIT_LIMIT),
            (b.residue.low.ln(), b.residue.high.ln()),
        ];
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for _ in 0..self.k {
            for (l, h) in one {
                lo.push(l);
                hi.push(h);
            }
        }
        if self.free_noise {
            lo.push(b.noise.low.ln());
            hi.push(b.noise.high.ln());
        }
        Bounds::new(lo, hi).expect("validated boxes")
    }

    fn pack(&self, comps: &[Component], noise_sd: f64) -> Vec<f64> {
        let b = &self.boxes;
        let z = &b.damping_ratio;
        let mut v = Vec::with_capacity(self.dim());
        for c in comps {
            v.push(b.signal_variance.clamp(c.kernel.signal_variance).ln());
            v.push(b.lengthscale.clamp(c.kernel.lengthscale).ln());
            v.push(b.natural_frequency.clamp(c.mean.natural_frequency_hz));
            let s = (z.clamp(c.mean.damping_ratio) - z.low) / (z.high - z.low);
            let u = if s <= 0.0 {
                -LOGIT_LIMIT
            } else if s >= 1.0 {
                LOGIT_LIMIT
            } else {
                (s / (1.0 - s)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
            };
            v.push(u);
            v.push(b.residue.clamp(c.mean.residue.abs()).ln());
        }
        if self.free_noise {
            v.push(b.noise.clamp(noise_sd).ln());
        }
        v
    }

    /// Components, sigma, and per-component chain factors d(natural)/d(coord).
    fn unpack(&self, v: &[f64], template: &[Component], fixed_noise: f64) -> (Vec<Component>, f64, Vec<[f64; 5]>) {
        let z = &self.boxes.damping_ratio;
        let mut comps = Vec::with_capacity(self.k);
        let mut chain = Vec::with_capacity(self.k);
        for (k, t) in template.iter().enumerate() {
            let p = &v[5 * k..5 * k + 5];
            let s = sigmoid(p[3]);
            let zeta = z.low + (z.high - z.low) * s;
            let residue = p[4].exp();
            comps.push(Component {
                kernel: KernelParams {
                    signal_variance: p[0].exp(),
                    lengthscale: p[1].exp(),
                },
                mean: MeanParams {
                    natural_frequency_hz: p[2],
                    damping_ratio: zeta,
                    residue,
                    part: t.mean.part,
                    sign: t.mean.sign,
                },
            });
            chain.push([1.0, 1.0, 1.0, (z.high - z.low) * s * (1.0 - s), residue]);
        }
        let sigma = if self.free_noise { v[5 * self.k].exp() } else { fixed_noise };
        (comps, sigma, chain)
    }

    fn boundary_names(&self, active: &[bool]) -> Vec<String> {
        active
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(i, _)| {
                if i == 5 * self.k {
                    "noise".to_string()
                } else {
                    format!("component {} {}", i / 5, PARAM_NAMES[i % 5])
                }
            })
            .collect()
    }
}

/// The bound as a function of the hyperparameters, responsibilities fixed.
struct MObjective<'a> {
    layout: &'a Layout,
    groups: &'a Groups,
    stats: Vec<Stats>,
    template: &'a [Component],
    fixed_noise: f64,
    assignment: f64,
}

impl MObjective<'_> {
    fn eval(&self, v: &[f64], with_grad: bool) -> (f64, Option<Vec<f64>>) {
        let (comps, sigma, chain) = self.layout.unpack(v, self.template, self.fixed_noise);
        let sigma2 = sigma * sigma;
        let mut total = self.assignment;
        let mut grad = vec![0.0; self.layout.dim()];
        for (k, c) in comps.iter().enumerate() {
            match component_term(self.groups, &self.stats[k], &c.kernel, &c.mean, sigma2, with_grad) {
                Ok(t) if t.value.is_finite() => {
                    total += t.value;
                    if let Some(g) = t.grad {
                        for p in 0..5 {
                            grad[5 * k + p] = g.params[p] * chain[k][p];
                        }
                        if self.layout.free_noise {
                            grad[5 * self.layout.k] += g.ln_sigma;
                        }
                    }
                }
                _ => return (f64::NEG_INFINITY, None),
            }
        }
        (total, with_grad.then_some(grad))
    }
}

impl Objective for MObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x, false).0
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.eval(x, true).1
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Option<Vec<f64>>) {
        self.eval(x, true)
    }
}

impl OmgpModel {
    /// Maximises the bound over all hyperparameters within the boxes,
    /// responsibilities fixed. The model is only replaced when the bound
    /// improves; the bound after the step is appended to the trace.
    pub fn m_step(&mut self, config: &FitConfig) -> Result<f64> {
        self.ensure_groups();
        let groups = self.groups.clone().expect("groups");
        let layout = Layout {
            k: self.k(),
            boxes: self.boxes,
            free_noise: !config.freeze_noise,
        };
        let current = match self.elbo_trace.last() {
            Some(v) => *v,
            None => self.elbo()?,
        };
        let objective = MObjective {
            layout: &layout,
            groups: &groups,
            stats: (0..self.k()).map(|k| self.stats(&groups, k)).collect(),
            template: &self.components,
            fixed_noise: self.noise_sd,
            assignment: assignment_term(&self.responsibilities, self.k()),
        };
        let start = layout.pack(&self.components, self.noise_sd);
        let bounds = layout.bounds();
        let outcome = optimizer::maximize(&objective, &start, &bounds, &config.optimizer);
        let mut accepted = false;
        if let Ok(res) = outcome {
            let (comps, sigma, _) = layout.unpack(&res.argmax, &self.components, self.noise_sd);
            let mut trial = self.clone();
            trial.components = comps;
            trial.noise_sd = sigma;
            if let Ok(v) = trial.elbo() {
                if v.is_finite() && v >= current {
                    self.components = trial.components;
                    self.noise_sd = trial.noise_sd;
                    self.boundary_active = layout.boundary_names(&res.boundary_active);
                    self.elbo_trace.push(v);
                    accepted = true;
                }
            }
        }
        if !accepted {
            self.m_step_rejections += 1;
            self.elbo_trace.push(current);
        }
        Ok(*self.elbo_trace.last().expect("trace entry"))
    }

    /// Alternates M- and E-steps until the relative bound change per
    /// iteration drops below the tolerance.
    fn run_em(&mut self, config: &FitConfig) -> Result<usize> {
        let mut previous = self.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY);
        for it in 0..config.max_em_iters {
            self.m_step(config)?;
            let now = self.e_step(config.inner_iters)?;
            if (now - previous).abs() < config.elbo_rel_tol * now.abs().max(1.0) {
                return Ok(it + 1);
            }
            previous = now;
        }
        Ok(config.max_em_iters)
    }
}

/// Outcome of one restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub restart: usize,
    pub seeded: bool,
    pub elbo: Option<f64>,
    pub em_iterations: usize,
    pub error: Option<String>,
}

fn log_uniform(rng: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

fn random_hyperparameters(rng: &mut rng::Rng, boxes: &Boxes, k: usize, part: Part, config: &FitConfig) -> Hyperparameters {
    let components = (0..k)
        .map(|_| Component {
            kernel: KernelParams {
                signal_variance: log_uniform(rng, boxes.signal_variance.low, boxes.signal_variance.high),
                lengthscale: log_uniform(rng, boxes.lengthscale.low, boxes.lengthscale.high),
            },
            mean: MeanParams {
                natural_frequency_hz: rng.random_range(boxes.natural_frequency.low..=boxes.natural_frequency.high),
                damping_ratio: rng.random_range(boxes.damping_ratio.low..=boxes.damping_ratio.high),
                residue: log_uniform(rng, boxes.residue.low, boxes.residue.high),
                part,
                sign: config.sign,
            },
        })
        .collect();
    Hyperparameters {
        components,
        noise_sd: log_uniform(rng, boxes.noise.low, boxes.noise.high),
    }
}

/// Clamps seed hyperparameters into the boxes and retargets them to `part`.
fn adapt_seed(init: &Hyperparameters, boxes: &Boxes, part: Part, config: &FitConfig) -> Hyperparameters {
    Hyperparameters {
        components: init
            .components
            .iter()
            .map(|c| Component {
                kernel: KernelParams {
                    signal_variance: boxes.signal_variance.clamp(c.kernel.signal_variance),
                    lengthscale: boxes.lengthscale.clamp(c.kernel.lengthscale),
                },
                mean: MeanParams {
                    natural_frequency_hz: boxes.natural_frequency.clamp(c.mean.natural_frequency_hz),
                    damping_ratio: boxes.damping_ratio.clamp(c.mean.damping_ratio),
                    residue: boxes.residue.clamp(c.mean.residue.abs()),
                    part,
                    sign: config.sign,
                },
            })
            .collect(),
        noise_sd: boxes.noise.clamp(init.noise_sd),
    }
}

fn run_restart(
    x: &[f64],
    y: &[f64],
    part: Part,
    boxes: &Boxes,
    hyper: Hyperparameters,
    seeded: bool,
    config: &FitConfig,
) -> Result<(OmgpModel, usize)> {
    let mut model = OmgpModel::new(x.to_vec(), y.to_vec(), part, hyper.components, hyper.noise_sd, *boxes)?;
    model.seed = config.seed;
    model.ensure_groups();
    if seeded {
        // informative hyperparameters: assign first, then alternate
        model.assign_from_prior_means();
        model.elbo_trace.push(model.elbo()?);
        model.e_step(config.inner_iters)?;
    } else {
        // uniform responsibilities: each component first climbs to the
        // nearest feature of the pooled data
        model.elbo_trace.push(model.elbo()?);
    }
    let iters = model.run_em(config)?;
    Ok((model, iters))
}

/// Fits a K-component mixture with several restarts and keeps the one with
/// the highest final bound. When `init` is given, restart 0 starts from it.
pub fn fit(
    x: &[f64],
    y: &[f64],
    k: usize,
    part: Part,
    config: &FitConfig,
    init: Option<&Hyperparameters>,
) -> Result<(OmgpModel, Vec<RestartReport>)> {
    config.validate()?;
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    if x.len() != y.len() || x.len() < k {
        return Err(Error::input(format!(
            "need len(x) = len(y) >= K (got {}, {}, K = {k})",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::input("training data must be finite"));
    }
    if let Some(h) = init {
        if h.components.len() != k {
            return Err(Error::input("seed hyperparameters have the wrong K"));
        }
    }
    let boxes = match config.boxes {
        Some(b) => b,
        None => {
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let band = Band::new(lo, if hi > lo { hi } else { lo + 1.0 })?;
            Boxes::for_data(y, band)
        }
    };
    boxes.validate()?;

    let mut best: Option<OmgpModel> = None;
    let mut reports = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let mut rng = rng::stream(rng::child_seed(config.seed, streams::RESTART, r as u64), streams::RESTART);
        let seeded = r == 0 && init.is_some();
        let hyper = match init {
            Some(h) if seeded => adapt_seed(h, &boxes, part, config),
            _ => random_hyperparameters(&mut rng, &boxes, k, part, config),
        };
        match run_restart(x, y, part, &boxes, hyper, seeded, config) {
            Ok((model, iters)) => {
                let elbo = model.elbo_value().unwrap_or(f64::NEG_INFINITY);
                reports.push(RestartReport {
                    restart: r,
                    seeded,
                    elbo: Some(elbo),
                    em_iterations: iters,
                    error: None,
                });
                let better = best
                    .as_ref()
                    .is_none_or(|b| elbo > b.elbo_value().unwrap_or(f64::NEG_INFINITY));
                if elbo.is_finite() && better {
                    best = Some(model);
                }
            }
            Err(e) => reports.push(RestartReport {
                restart: r,
                seeded,
                elbo: None,
                em_iterations: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some(m) => Ok((m, reports)),
        None => Err(Error::FitFailed(
            reports
                .iter()
                .map(|r| format!("restart {}: {}", r.restart, r.error.as_deref().unwrap_or("non-finite bound")))
                .collect(),
        )),
    }
}

/// Fraction of labels matching the truth under the best relabelling of the
/// predicted classes (exhaustive over permutations).
pub fn permutation_accuracy(predicted: &[usize], truth: &[usize], k: usize) -> f64 {
    if predicted.is_empty() {
        return 1.0;
    }
    let t = truth.iter().copied().max().map_or(0, |m| m + 1).max(k);
    let mut counts = vec![vec![0usize; t]; k];
    for (&p, &q) in predicted.iter().zip(truth) {
        if p < k {
            counts[p][q] += 1;
        }
    }
    let mut used = vec![false; t];
    let best = best_assignment(&counts, 0, &mut used);
    best as f64 / predicted.len() as f64
}

fn best_assignment(counts: &[Vec<usize>], row: usize, used: &mut [bool]) -> usize {
    if row == counts.len() {
        return 0;
    }
    let mut best = 0;
    for col in 0..used.len() {
        if !used[col] {
            used[col] = true;
            best = best.max(counts[row][col] + best_assignment(counts, row + 1, used));
            used[col] = false;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Sign;
    use crate::optimizer::fd_gradient;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..90).map(|i| 48.0 + 0.1 * (i % 45) as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, f)| 0.3 * ((f - 50.0) * (1.0 + (i % 2) as f64)).sin() + 0.01 * (i as f64).cos())
            .collect();
        let boxes = Boxes::for_data(&y, Band::new(48.0, 56.0).unwrap());
        let comps: Vec<Component> = (0..2)
            .map(|k| Component {
                kernel: KernelParams { signal_variance: 1e-3 * (1 + k) as f64, lengthscale: 0.6 + 0.4 * k as f64 },
                mean: MeanParams {
                    natural_frequency_hz: 50.0 + 3.0 * k as f64,
                    damping_ratio: 0.03,
                    residue: 0.02,
                    part: if k == 0 { Part::Real } else { Part::Real },
                    sign: Sign::Positive,
                },
            })
            .collect();
        let mut model = OmgpModel::new(x, y, Part::Real, comps, 0.05, boxes).unwrap();
        model.e_step(2).unwrap();
        let groups = model.groups();
        let layout = Layout { k: 2, boxes, free_noise: true };
        let obj = MObjective {
            layout: &layout,
            groups: &groups,
            stats: (0..2).map(|k| model.stats(&groups, k)).collect(),
            template: &model.components,
            fixed_noise: model.noise_sd,
            assignment: assignment_term(&model.responsibilities, 2),
        };
        let v = layout.pack(&model.components, model.noise_sd);
        let (f0, g) = obj.value_and_gradient(&v);
        assert!((f0 - model.elbo().unwrap()).abs() < 1e-8 * f0.abs());
        let g = g.unwrap();
        let fd = fd_gradient(&obj, &v, f0, &layout.bounds());
        for i in 0..g.len() {
            assert!((g[i] - fd[i]).abs() <= 1e-4 * fd[i].abs().max(1.0), "coordinate {i}: {} vs {}", g[i], fd[i]);
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let boxes = Boxes::for_data(&[1.0], Band::new(48.0, 56.0).unwrap());
        let layout = Layout { k: 1, boxes, free_noise: true };
        let c = Component {
            kernel: KernelParams { signal_variance: 0.01, lengthscale: 1.0 },
            mean: MeanParams {
                natural_frequency_hz: 52.0,
                damping_ratio: 0.03,
                residue: 0.1,
                part: Part::Imaginary,
                sign: Sign::Negative,
            },
        };
        let v = layout.pack(&[c], 0.02);
        let (back, s, _) = layout.unpack(&v, &[c], 0.0);
        assert!((back[0].mean.damping_ratio - 0.03).abs() < 1e-14);
        assert!((back[0].kernel.lengthscale - 1.0).abs() < 1e-14);
        assert!((s - 0.02).abs() < 1e-15);
        assert_eq!(back[0].mean.part, Part::Imaginary);
        assert_eq!(back[0].mean.sign, Sign::Negative);
    }
}
