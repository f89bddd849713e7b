//! BFGS quasi-Newton minimisation with a backtracking Armijo line search.

use serde::{Deserialize, Serialize};

/// Objective with a gradient supplied by the caller (typically finite differences).
pub trait Objective {
    /// Value at `x`; `+inf` marks an infeasible point.
    fn value(&mut self, x: &[f64]) -> f64;
    /// Gradient at `x`, which is always the point most recently passed to `value`.
    fn gradient(&mut self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Relative objective change below which the objective is considered settled.
    pub f_rel_tol: f64,
    /// Gradient sup-norm below which the point is considered stationary.
    pub grad_tol: f64,
    /// Largest allowed sup-norm of a single step.
    pub max_step: f64,
    /// Coordinates held fixed (`false`) during the search; empty means all free.
    pub free: Vec<bool>,
    /// Coordinates excluded from the gradient convergence test.
    pub ignore_in_grad_test: Vec<bool>,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            f_rel_tol: 1e-8,
            grad_tol: 1e-5,
            max_step: 5.0,
            free: Vec::new(),
            ignore_in_grad_test: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BfgsStop {
    Converged,
    MaxIterations,
    LineSearchFailed,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub stop: BfgsStop,
    /// Relative objective change of the last accepted step.
    pub last_rel_change: f64,
}

impl BfgsOutcome {
    /// Sup-norm of the gradient over the coordinates that count.
    pub fn grad_norm(&self, opts: &BfgsOptions) -> f64 {
        sup_norm(&self.gradient, opts)
    }
}

fn sup_norm(g: &[f64], opts: &BfgsOptions) -> f64 {
    g.iter()
        .enumerate()
        .filter(|(i, _)| opts.free.get(*i).copied().unwrap_or(true))
        .filter(|(i, _)| !opts.ignore_in_grad_test.get(*i).copied().unwrap_or(false))
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `obj` from `x0`.
pub fn minimize_bfgs<O: Objective>(obj: &mut O, x0: &[f64], opts: &BfgsOptions) -> BfgsOutcome {
    let n = x0.len();
    let free: Vec<usize> = (0..n).filter(|&i| opts.free.get(i).copied().unwrap_or(true)).collect();
    let m = free.len();
    let mut x = x0.to_vec();
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return BfgsOutcome {
            x,
            value: f,
            gradient: vec![f64::NAN; n],
            iterations: 0,
            stop: BfgsStop::NonFinite,
            last_rel_change: f64::NAN,
        };
    }
    let mut g = obj.gradient(&x);
    let mut h = vec![0.0; m * m];
    let reset = |h: &mut [f64], scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            h[i * m + i] = scale;
        }
    };
    let gmax = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
    let mut fresh = true;
    reset(&mut h, if gmax > 1.0 { 1.0 / gmax } else { 1.0 });
    let mut last_rel = f64::INFINITY;
    let mut stop = BfgsStop::MaxIterations;
    let mut iter = 0;

    while iter < opts.max_iterations {
        if g.iter().any(|v| !v.is_finite()) {
            stop = BfgsStop::NonFinite;
            break;
        }
        let gn = sup_norm(&g, opts);
        if gn < opts.grad_tol && last_rel < opts.f_rel_tol {
            stop = BfgsStop::Converged;
            break;
        }
        iter += 1;

        let gf: Vec<f64> = free.iter().map(|&i| g[i]).collect();
        let mut d: Vec<f64> = (0..m).map(|r| -dot(&h[r * m..(r + 1) * m], &gf)).collect();
        let mut slope = dot(&gf, &d);
        if !(slope < 0.0) {
            reset(&mut h, 1.0 / gf.iter().map(|v| v.abs()).fold(1.0, f64::max));
            fresh = true;
            d = (0..m).map(|r| -h[r * m + r] * gf[r]).collect();
            slope = dot(&gf, &d);
        }
        let dmax = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if dmax > opts.max_step {
            let s = opts.max_step / dmax;
            d.iter_mut().for_each(|v| *v *= s);
            slope *= s;
        }

        // Backtracking with safeguarded quadratic interpolation.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn = x.clone();
            for (r, &i) in free.iter().enumerate() {
                xn[i] += alpha * d[r];
            }
            let fn_ = obj.value(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * alpha * slope {
                accepted = Some((xn, fn_));
                break;
            }
            let next = if fn_.is_finite() {
                let denom = 2.0 * (fn_ - f - slope * alpha);
                let a = if denom > 0.0 { -slope * alpha * alpha / denom } else { 0.5 * alpha };
                a.clamp(0.1 * alpha, 0.5 * alpha)
            } else {
                0.25 * alpha
            };
            alpha = next;
            if alpha * dmax.min(opts.max_step) < 1e-14 {
                break;
            }
        }
        let Some((xn, fn_)) = accepted else {
            if fresh {
                stop = BfgsStop::LineSearchFailed;
                // Leave the objective's state at the final point.
                obj.value(&x);
                break;
            }
            reset(&mut h, 1.0 / gf.iter().map(|v| v.abs()).fold(1.0, f64::max));
            fresh = true;
            obj.value(&x);
            continue;
        };
        let gn_new = obj.gradient(&xn);
        let s: Vec<f64> = free.iter().map(|&i| xn[i] - x[i]).collect();
        let y: Vec<f64> = free.iter().map(|&i| gn_new[i] - g[i]).collect();
        last_rel = (f - fn_).abs() / f.abs().max(1.0);
        x = xn;
        f = fn_;
        g = gn_new;

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && y.iter().all(|v| v.is_finite()) {
            if fresh {
                reset(&mut h, sy / dot(&y, &y));
                fresh = false;
            }
            // H+ = (I - rho s y') H (I - rho y s') + rho s s'
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..m).map(|r| dot(&h[r * m..(r + 1) * m], &y)).collect();
            let yhy = dot(&y, &hy);
            for r in 0..m {
                for c in 0..m {
                    h[r * m + c] += -rho * (hy[r] * s[c] + s[r] * hy[c]) + (rho * rho * yhy + rho) * s[r] * s[c];
                }
            }
        }
    }
    if stop == BfgsStop::MaxIterations && sup_norm(&g, opts) < opts.grad_tol && last_rel < opts.f_rel_tol {
        stop = BfgsStop::Converged;
    }
    BfgsOutcome { x, value: f, gradient: g, iterations: iter, stop, last_rel_change: last_rel }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&mut self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
            vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize_bfgs(&mut Rosenbrock, &[-1.2, 1.0], &BfgsOptions::default());
        assert_eq!(out.stop, BfgsStop::Converged);
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5);
    }

    struct Quad;

    impl Objective for Quad {
        fn value(&mut self, x: &[f64]) -> f64 {
            if x[0] < -10.0 {
                return f64::INFINITY;
            }
            (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2) + 0.5 * x[0] * x[1]
        }
        fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
            vec![2.0 * (x[0] - 3.0) + 0.5 * x[1], 20.0 * (x[1] + 1.0) + 0.5 * x[0]]
        }
    }

    #[test]
    fn respects_fixed_coordinates() {
        let opts = BfgsOptions { free: vec![true, false], ..BfgsOptions::default() };
        let out = minimize_bfgs(&mut Quad, &[0.0, 2.0], &opts);
        assert_eq!(out.x[1], 2.0);
        assert!((out.x[0] - 2.5).abs() < 1e-6);
        assert_eq!(out.stop, BfgsStop::Converged);
    }

    #[test]
    fn infeasible_start_reports_non_finite() {
        let out = minimize_bfgs(&mut Quad, &[-20.0, 0.0], &BfgsOptions::default());
        assert_eq!(out.stop, BfgsStop::NonFinite);
    }
}
