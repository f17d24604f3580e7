//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The returned point is always the best iterate seen, so the final value
//! never exceeds the starting value.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::netaction::Action;

/// A smooth function with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Returns `f(x)` and writes `grad f(x)` into `grad`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl Objective for Action<'_> {
    fn dim(&self) -> usize {
        self.len()
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.value_and_gradient(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once `max_i |g_i|` drops below this.
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_linesearch: usize,
    /// Stop when the relative decrease over the last `past` iterations falls
    /// below this. Zero disables the test.
    #[serde(default)]
    pub rel_ftol: f64,
    #[serde(default = "default_past")]
    pub past: usize,
}

fn default_past() -> usize {
    10
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 2000,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_linesearch: 40,
            rel_ftol: 0.0,
            past: default_past(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeReport {
    pub value: f64,
    pub initial_value: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl MinimizeReport {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            Termination::GradientTolerance | Termination::FunctionTolerance
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Counted<'a, O> {
    obj: &'a O,
    evals: usize,
}

impl<O: Objective> Counted<'_, O> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evals += 1;
        self.obj.eval(x, g)
    }
}

/// Minimizes `obj` starting from `x`, leaving the best iterate in `x`.
pub fn minimize<O: Objective>(obj: &O, x: &mut [f64], cfg: &LbfgsConfig) -> MinimizeReport {
    let n = x.len();
    assert_eq!(n, obj.dim(), "start point has the wrong dimension");
    let mut f_eval = Counted { obj, evals: 0 };
    let mut g = vec![0.0; n];
    let mut f = f_eval.eval(x, &mut g);
    let initial_value = f;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return MinimizeReport {
            value: f,
            initial_value,
            grad_inf: f64::NAN,
            iterations: 0,
            evaluations: f_eval.evals,
            termination: Termination::NonFinite,
        };
    }

    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut rho_hist: VecDeque<f64> = VecDeque::with_capacity(cfg.memory);
    let mut f_past: VecDeque<f64> = VecDeque::with_capacity(cfg.past + 1);
    f_past.push_back(f);

    let mut d = vec![0.0; n];
    let mut alpha_buf = vec![0.0; cfg.memory];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut ls = LineSearch::new(n);

    let mut iter = 0;
    let termination = loop {
        let gnorm = inf_norm(&g);
        if gnorm < cfg.grad_tol {
            break Termination::GradientTolerance;
        }
        if iter >= cfg.max_iters {
            break Termination::MaxIterations;
        }

        // two-loop recursion: d = -H g
        d.copy_from_slice(&g);
        let k = s_hist.len();
        for i in (0..k).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &d);
            alpha_buf[i] = a;
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= a * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let b = rho_hist[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alpha_buf[i] - b) * sj;
            }
        }
        d.iter_mut().for_each(|v| *v = -*v);

        let mut dg = dot(&d, &g);
        if !(dg < 0.0) {
            // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            for (dj, gj) in d.iter_mut().zip(&g) {
                *dj = -gj;
            }
            dg = -dot(&g, &g);
        }
        let step0 = if s_hist.is_empty() {
            1.0 / dot(&d, &d).sqrt()
        } else {
            1.0
        };

        let accepted = ls.search(&mut f_eval, x, f, dg, &d, step0, cfg, &mut x_new, &mut g_new);
        let Some(f_next) = accepted else {
            if s_hist.is_empty() {
                break Termination::LineSearchFailed;
            }
            // retry once along steepest descent with an empty memory
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            continue;
        };

        // update memory with s = x_new - x, y = g_new - g
        let (mut s, mut y) = if s_hist.len() == cfg.memory {
            rho_hist.pop_front();
            (s_hist.pop_front().unwrap(), y_hist.pop_front().unwrap())
        } else {
            (vec![0.0; n], vec![0.0; n])
        };
        for i in 0..n {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
        }
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            rho_hist.push_back(1.0 / sy);
            s_hist.push_back(s);
            y_hist.push_back(y);
        }
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        f = f_next;
        iter += 1;

        if cfg.rel_ftol > 0.0 {
            f_past.push_back(f);
            if f_past.len() > cfg.past {
                let old = f_past.pop_front().unwrap();
                if (old - f) <= cfg.rel_ftol * f.abs().max(f64::MIN_POSITIVE) {
                    break Termination::FunctionTolerance;
                }
            }
        }
    };

    MinimizeReport {
        value: f,
        initial_value,
        grad_inf: inf_norm(&g),
        iterations: iter,
        evaluations: f_eval.evals,
        termination,
    }
}

struct LineSearch {
    best_x: Vec<f64>,
    best_g: Vec<f64>,
}

impl LineSearch {
    fn new(n: usize) -> Self {
        Self {
            best_x: vec![0.0; n],
            best_g: vec![0.0; n],
        }
    }

    /// Strong-Wolfe search along `d`. On success the accepted point and its
    /// gradient are in `x_new`, `g_new` and its value is returned. If the
    /// Wolfe conditions cannot be met, the best point satisfying sufficient
    /// decrease is returned instead; `None` means no decrease was found.
    #[allow(clippy::too_many_arguments)]
    fn search<O: Objective>(
        &mut self,
        f_eval: &mut Counted<'_, O>,
        x: &[f64],
        f0: f64,
        dg0: f64,
        d: &[f64],
        step0: f64,
        cfg: &LbfgsConfig,
        x_new: &mut [f64],
        g_new: &mut [f64],
    ) -> Option<f64> {
        let mut best_f: Option<f64> = None;
        let mut evals = 0usize;

        let mut probe = |alpha: f64, x_new: &mut [f64], g_new: &mut [f64], evals: &mut usize| -> (f64, f64) {
            for i in 0..x.len() {
                x_new[i] = x[i] + alpha * d[i];
            }
            *evals += 1;
            let phi = f_eval.eval(x_new, g_new);
            let dphi = dot(g_new, d);
            (phi, dphi)
        };
        let armijo = |alpha: f64, phi: f64| phi <= f0 + cfg.c1 * alpha * dg0;
        let curvature = |dphi: f64| dphi.abs() <= -cfg.c2 * dg0;

        let mut a_prev = 0.0;
        let mut phi_prev = f0;
        let mut dphi_prev = dg0;
        let mut alpha = step0;

        // bracketing phase
        let (mut lo, mut hi);
        let mut first = true;
        loop {
            if evals >= cfg.max_linesearch {
                return self.fallback(best_f, x_new, g_new);
            }
            let (phi, dphi) = probe(alpha, x_new, g_new, &mut evals);
            if !phi.is_finite() || !dphi.is_finite() {
                // overshot into a non-finite region: bisect back
                alpha = 0.5 * (a_prev + alpha);
                continue;
            }
            if armijo(alpha, phi) && best_f.is_none_or(|b| phi < b) {
                best_f = Some(phi);
                self.best_x.copy_from_slice(x_new);
                self.best_g.copy_from_slice(g_new);
            }
            if !armijo(alpha, phi) || (!first && phi >= phi_prev) {
                lo = (a_prev, phi_prev, dphi_prev);
                hi = (alpha, phi, dphi);
                break;
            }
            if curvature(dphi) {
                return Some(phi);
            }
            if dphi >= 0.0 {
                lo = (alpha, phi, dphi);
                hi = (a_prev, phi_prev, dphi_prev);
                break;
            }
            a_prev = alpha;
            phi_prev = phi;
            dphi_prev = dphi;
            alpha *= 2.0;
            first = false;
        }

        // zoom phase
        loop {
            if evals >= cfg.max_linesearch {
                return self.fallback(best_f, x_new, g_new);
            }
            let (a_lo, phi_lo, dphi_lo) = lo;
            let (a_hi, phi_hi, dphi_hi) = hi;
            let width = a_hi - a_lo;
            if width.abs() <= f64::EPSILON * a_lo.abs().max(a_hi.abs()) {
                return self.fallback(best_f, x_new, g_new);
            }
            let mut a = cubic_min(a_lo, phi_lo, dphi_lo, a_hi, phi_hi, dphi_hi)
                .unwrap_or(a_lo + 0.5 * width);
            let (left, right) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
            let margin = 0.1 * (right - left);
            if !(a > left + margin && a < right - margin) {
                a = 0.5 * (a_lo + a_hi);
            }
            let (phi, dphi) = probe(a, x_new, g_new, &mut evals);
            if !phi.is_finite() || !dphi.is_finite() {
                hi = (a, f64::INFINITY, 0.0);
                continue;
            }
            if armijo(a, phi) && best_f.is_none_or(|b| phi < b) {
                best_f = Some(phi);
                self.best_x.copy_from_slice(x_new);
                self.best_g.copy_from_slice(g_new);
            }
            if !armijo(a, phi) || phi >= phi_lo {
                hi = (a, phi, dphi);
            } else {
                if curvature(dphi) {
                    return Some(phi);
                }
                if dphi * (a_hi - a_lo) >= 0.0 {
                    hi = lo;
                }
                lo = (a, phi, dphi);
            }
        }
    }

    fn fallback(&self, best_f: Option<f64>, x_new: &mut [f64], g_new: &mut [f64]) -> Option<f64> {
        let f = best_f?;
        x_new.copy_from_slice(&self.best_x);
        g_new.copy_from_slice(&self.best_g);
        Some(f)
    }
}

/// Minimizer of the cubic interpolating two points with slopes.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    if !fb.is_finite() {
        return None;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    t.is_finite().then_some(t)
}
