//! Box-constrained maximisation.
//!
//! Two methods: a projected L-BFGS with backtracking along the projected
//! path, and a derivative-free compass search. Every trial point is projected
//! onto the box before it is evaluated.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower and upper limits per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::input("bounds of unequal length"));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::input(format!("bad bounds at {i}: {l}..{u}")));
            }
        }
        Ok(Bounds { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn at_bound(&self, x: &[f64]) -> Vec<bool> {
        x.iter()
            .enumerate()
            .map(|(i, v)| *v <= self.lower[i] || *v >= self.upper[i])
            .collect()
    }
}

/// Something to maximise. Without an analytic gradient the optimiser falls
/// back to central differences.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Option<Vec<f64>>) {
        (self.value(x), self.gradient(x))
    }
}

impl<F: Fn(&[f64]) -> f64> Objective for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Central differences with step `1e-5 * width`, one-sided at the walls.
pub fn fd_gradient(obj: &dyn Objective, x: &[f64], f0: f64, bounds: &Bounds) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xt = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * bounds.width(i);
        let up = (x[i] + h).min(bounds.upper[i]);
        let dn = (x[i] - h).max(bounds.lower[i]);
        xt[i] = up;
        let fu = if up > x[i] { obj.value(&xt) } else { f0 };
        xt[i] = dn;
        let fd = if dn < x[i] { obj.value(&xt) } else { f0 };
        xt[i] = x[i];
        g[i] = if up > dn { (fu - fd) / (up - dn) } else { 0.0 };
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    QuasiNewton,
    PatternSearch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Options {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol: 1e-8,
            max_iter: 200,
            method: Method::QuasiNewton,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub boundary_active: Vec<bool>,
}

pub fn maximize(obj: &dyn Objective, start: &[f64], bounds: &Bounds, opts: &Options) -> Result<OptResult> {
    if !bounds.contains(start) {
        return Err(Error::input("start point outside the box"));
    }
    let f0 = obj.value(start);
    if !f0.is_finite() {
        return Err(Error::input("objective is not finite at the start point"));
    }
    match opts.method {
        Method::QuasiNewton => Ok(lbfgs(obj, start, f0, bounds, opts)),
        Method::PatternSearch => Ok(compass(obj, start, f0, bounds, opts)),
    }
}

const MEMORY: usize = 10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of the value being maximised, analytic when available.
fn ascent_gradient(obj: &dyn Objective, x: &[f64], bounds: &Bounds) -> (f64, Vec<f64>) {
    let (v, g) = obj.value_and_gradient(x);
    match g {
        Some(g) if g.iter().all(|c| c.is_finite()) => (v, g),
        _ => (v, fd_gradient(obj, x, v, bounds)),
    }
}

// Works on the negated objective so the textbook minimisation form applies.
fn lbfgs(obj: &dyn Objective, start: &[f64], f_start: f64, bounds: &Bounds, opts: &Options) -> OptResult {
    let n = start.len();
    let mut x = start.to_vec();
    let (v, g) = ascent_gradient(obj, &x, bounds);
    let mut f = -v;
    debug_assert!((v - f_start).abs() <= 1e-12 * v.abs().max(1.0) || !v.is_finite());
    let mut g: Vec<f64> = g.iter().map(|c| -c).collect();
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0)))
            .collect();
        let pg: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let pg_norm = pg.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if pg_norm <= opts.tol * f.abs().max(1.0) * 1e-3 {
            converged = true;
            break;
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !mem.is_empty();
            let mut d = if use_memory { two_loop(&pg, &mem) } else { pg.clone() };
            for i in 0..n {
                d[i] = if free[i] { -d[i] } else { 0.0 };
            }
            let mut t = 1.0;
            if !use_memory || dot(&d, &pg) >= 0.0 {
                // steepest descent, first move at most a tenth of each box width
                d = pg.iter().map(|c| -c).collect();
                let rel = (0..n).fold(0.0f64, |m, i| m.max(d[i].abs() / bounds.width(i)));
                t = if rel > 0.0 { 0.1 / rel } else { 0.0 };
            }
            if t == 0.0 {
                break;
            }
            if let Some(step) = backtrack(obj, &x, f, &g, &d, t, bounds) {
                accepted = Some(step);
                break;
            }
            if !use_memory {
                break;
            }
            mem.clear();
        }

        let Some((xt, ft)) = accepted else {
            // no descent step found at machine resolution
            converged = true;
            break;
        };
        let (vt, gt) = ascent_gradient(obj, &xt, bounds);
        let gt: Vec<f64> = gt.iter().map(|c| -c).collect();
        debug_assert!((-vt - ft).abs() <= 1e-9 * ft.abs().max(1.0));
        let s: Vec<f64> = (0..n).map(|i| xt[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gt[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy.is_finite() {
            if mem.len() == MEMORY {
                mem.pop_front();
            }
            mem.push_back((s.clone(), y, 1.0 / sy));
        }
        let df = (f - ft).abs();
        let scale = f.abs().max(ft.abs()).max(1.0);
        x = xt;
        f = ft;
        g = gt;
        if df <= opts.tol * scale {
            converged = true;
            break;
        }
    }
    OptResult {
        boundary_active: bounds.at_bound(&x),
        argmax: x,
        value: -f,
        iterations,
        converged,
    }
}

fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; mem.len()];
    for (k, (s, y, rho)) in mem.iter().enumerate().rev() {
        alpha[k] = rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= alpha[k] * y[i];
        }
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in &mut q {
            *v *= gamma;
        }
    }
    for (k, (s, y, rho)) in mem.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += s[i] * (alpha[k] - beta);
        }
    }
    q
}

/// Armijo backtracking along the projected path `P(x + t d)`.
fn backtrack(
    obj: &dyn Objective,
    x: &[f64],
    f: f64,
    g: &[f64],
    d: &[f64],
    t0: f64,
    bounds: &Bounds,
) -> Option<(Vec<f64>, f64)> {
    let mut t = t0;
    for _ in 0..60 {
        let mut xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        bounds.project(&mut xt);
        if xt.iter().zip(x).all(|(a, b)| a == b) {
            return None;
        }
        let decrease: f64 = g.iter().zip(xt.iter().zip(x)).map(|(gi, (a, b))| gi * (a - b)).sum();
        let ft = -obj.value(&xt);
        if ft.is_finite() && ft <= f + 1e-4 * decrease && ft < f {
            return Some((xt, ft));
        }
        t *= 0.5;
    }
    None
}

fn compass(obj: &dyn Objective, start: &[f64], f_start: f64, bounds: &Bounds, opts: &Options) -> OptResult {
    let n = start.len();
    let mut x = start.to_vec();
    let mut f = f_start;
    let mut step: Vec<f64> = (0..n).map(|i| 0.25 * bounds.width(i)).collect();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut improved = false;
        for i in 0..n {
            for dir in [1.0, -1.0] {
                let cand = (x[i] + dir * step[i]).clamp(bounds.lower[i], bounds.upper[i]);
                if cand == x[i] {
                    continue;
                }
                let old = x[i];
                x[i] = cand;
                let ft = obj.value(&x);
                if ft.is_finite() && ft > f {
                    f = ft;
                    improved = true;
                    break;
                }
                x[i] = old;
            }
        }
        if !improved {
            for s in &mut step {
                *s *= 0.5;
            }
            if (0..n).all(|i| step[i] < opts.tol * bounds.width(i).max(1.0)) {
                converged = true;
                break;
            }
        }
    }
    OptResult {
        boundary_active: bounds.at_bound(&x),
        argmax: x,
        value: f,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bowl(c: Vec<f64>) -> impl Fn(&[f64]) -> f64 {
        move |x: &[f64]| -x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    fn unit_box(n: usize, lo: f64, hi: f64) -> Bounds {
        Bounds::new(vec![lo; n], vec![hi; n]).unwrap()
    }

    #[test]
    fn interior_quadratic() {
        let c = vec![0.3, -1.2, 2.0];
        let b = unit_box(3, -5.0, 5.0);
        for method in [Method::QuasiNewton, Method::PatternSearch] {
            let opts = Options { tol: 1e-10, max_iter: 2000, method };
            let r = maximize(&bowl(c.clone()), &[0.0; 3], &b, &opts).unwrap();
            for i in 0..3 {
                assert!((r.argmax[i] - c[i]).abs() < 1e-6, "{method:?} {:?}", r.argmax);
            }
            assert!(r.converged);
            assert!(r.boundary_active.iter().all(|a| !a));
        }
    }

    #[test]
    fn clipped_quadratic_lands_on_boundary() {
        let b = unit_box(2, -1.0, 1.0);
        for method in [Method::QuasiNewton, Method::PatternSearch] {
            let opts = Options { tol: 1e-10, max_iter: 2000, method };
            let r = maximize(&bowl(vec![3.0, 0.5]), &[0.0, 0.0], &b, &opts).unwrap();
            assert_eq!(r.argmax[0], 1.0);
            assert!((r.argmax[1] - 0.5).abs() < 1e-6);
            assert_eq!(r.boundary_active, vec![true, false]);
        }
    }

    #[test]
    fn rosenbrock_matches_grid_oracle() {
        let b = Bounds::new(vec![-1.5, -0.5], vec![0.8, 2.0]).unwrap();
        // dense grid search oracle
        let mut best = f64::NEG_INFINITY;
        let n = 1500;
        for i in 0..=n {
            for j in 0..=n {
                let x = [-1.5 + 2.3 * i as f64 / n as f64, -0.5 + 2.5 * j as f64 / n as f64];
                best = best.max(rosenbrock(&x));
            }
        }
        let starts = [[-1.2, 1.0], [0.5, 0.5], [-0.5, 1.8], [0.0, -0.4], [0.7, 1.5]];
        let opts = Options { tol: 1e-12, max_iter: 5000, method: Method::QuasiNewton };
        let got = starts
            .iter()
            .map(|s| maximize(&rosenbrock, s, &b, &opts).unwrap().value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((got - best).abs() < 1e-4, "{got} vs {best}");
        assert!(got >= best - 1e-12);
    }

    #[test]
    fn rejects_bad_starts() {
        let b = unit_box(1, 0.0, 1.0);
        assert!(maximize(&bowl(vec![0.5]), &[2.0], &b, &Options::default()).is_err());
        let nan = |_: &[f64]| f64::NAN;
        assert!(maximize(&nan, &[0.5], &b, &Options::default()).is_err());
        assert!(Bounds::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn survives_non_finite_regions() {
        // -inf to the right of 0.6, optimum of the finite part at 0.6
        let f = |x: &[f64]| if x[0] > 0.6 { f64::NEG_INFINITY } else { -(x[0] - 2.0).powi(2) };
        let b = unit_box(1, 0.0, 1.0);
        let r = maximize(&f, &[0.1], &b, &Options::default()).unwrap();
        assert!(r.value.is_finite());
        assert!(r.argmax[0] <= 0.6 && r.argmax[0] > 0.55);
    }

    struct Counting<'a> {
        evals: std::cell::RefCell<Vec<Vec<f64>>>,
        f: &'a dyn Fn(&[f64]) -> f64,
    }

    impl Objective for Counting<'_> {
        fn value(&self, x: &[f64]) -> f64 {
            self.evals.borrow_mut().push(x.to_vec());
            (self.f)(x)
        }
    }

    #[test]
    fn never_evaluates_outside_box() {
        let b = Bounds::new(vec![-0.5, 0.2], vec![0.4, 3.0]).unwrap();
        for method in [Method::QuasiNewton, Method::PatternSearch] {
            let obj = Counting { evals: Default::default(), f: &rosenbrock };
            let opts = Options { tol: 1e-9, max_iter: 500, method };
            maximize(&obj, &[0.0, 1.0], &b, &opts).unwrap();
            assert!(obj.evals.borrow().iter().all(|x| b.contains(x)));
        }
    }

    #[test]
    fn analytic_gradient_is_used() {
        struct Quad;
        impl Objective for Quad {
            fn value(&self, x: &[f64]) -> f64 {
                -(x[0] - 0.2).powi(2) - 4.0 * (x[1] + 0.1).powi(2)
            }
            fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
                Some(vec![-2.0 * (x[0] - 0.2), -8.0 * (x[1] + 0.1)])
            }
        }
        let b = unit_box(2, -1.0, 1.0);
        let r = maximize(&Quad, &[0.9, 0.9], &b, &Options::default()).unwrap();
        assert!((r.argmax[0] - 0.2).abs() < 1e-6 && (r.argmax[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn fd_gradient_accuracy() {
        let b = unit_box(2, -2.0, 2.0);
        let x = [0.3, 0.7];
        let g = fd_gradient(&rosenbrock, &x, rosenbrock(&x), &b);
        let exact = [
            2.0 * (1.0 - x[0]) + 400.0 * x[0] * (x[1] - x[0] * x[0]),
            -200.0 * (x[1] - x[0] * x[0]),
        ];
        assert!((g[0] - exact[0]).abs() < 1e-6 && (g[1] - exact[1]).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn never_worse_than_start_and_deterministic(
            c in proptest::collection::vec(-3.0f64..3.0, 1..5),
            s in 0.0f64..1.0,
        ) {
            let n = c.len();
            let b = unit_box(n, -1.0, 1.0);
            let start = vec![2.0 * s - 1.0; n];
            let f = bowl(c);
            let f0 = f(&start);
            let r1 = maximize(&f, &start, &b, &Options::default()).unwrap();
            let r2 = maximize(&f, &start, &b, &Options::default()).unwrap();
            prop_assert!(r1.value >= f0);
            prop_assert!(b.contains(&r1.argmax));
            prop_assert_eq!(r1, r2);
        }
    }
}
