//! Multi-start maximum likelihood fitting, Wald standard errors and
//! information criteria.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::likelihood::{log_sum_exp, CachedObjective, PreparedData};
use super::optimizer::{minimize_bfgs, BfgsOptions, BfgsOutcome, BfgsStop, Objective};
use super::packing::{pack_parameters, parameter_names, reporting_vector, unpack_parameters, ParameterLayout};
use super::start::kmeans_start;
use super::{ModelParameters, ModelSpec};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};

/// Gradient step for the bilinear knot, whose likelihood has a kink at every
/// individual measurement time.
const KNOT_GRADIENT_STEP: f64 = 0.02;
/// Hessian step for the bilinear knot (averages over many kinks).
const KNOT_HESSIAN_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StartStrategy {
    /// k-means on per-individual OLS summaries plus within-cluster moments.
    KMeans,
    /// A caller-supplied parameter set (used as is on the first attempt).
    Given(ModelParameters),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_attempts: usize,
    pub start: StartStrategy,
    pub f_rel_tol: f64,
    /// Sup-norm of the gradient of the negative log-likelihood treated as
    /// stationary. Much smaller values sit below the rounding noise of the
    /// objective at typical sample sizes.
    pub grad_tol: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Classes with smaller expected share make an attempt degenerate.
    pub min_class_share: f64,
    pub compute_standard_errors: bool,
    /// Weight of a ridge penalty on the gating coefficients. It keeps the
    /// estimates finite when the covariates separate the classes and is
    /// negligible otherwise; zero gives plain maximum likelihood.
    pub gating_ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_attempts: 10,
            start: StartStrategy::KMeans,
            f_rel_tol: 1e-8,
            grad_tol: 1e-3,
            max_iterations: 3000,
            seed: 0,
            min_class_share: 0.01,
            compute_standard_errors: true,
            gating_ridge: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Converged { attempts: usize },
    Failed { attempts: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub n_occasions: usize,
    pub n_individuals: usize,
    pub estimates: ModelParameters,
    pub parameter_names: Vec<String>,
    /// Estimates on the reporting scale, aligned with `parameter_names`.
    pub reported: Vec<f64>,
    /// Wald standard errors on the reporting scale (`None` when unavailable).
    pub standard_errors: Vec<Option<f64>>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_free_parameters: usize,
    /// `N x K` posterior class probabilities.
    pub posterior: Vec<Vec<f64>>,
    pub status: FitStatus,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn is_converged(&self) -> bool {
        matches!(self.status, FitStatus::Converged { .. })
    }

    pub fn neg2_loglik(&self) -> f64 {
        -2.0 * self.loglik
    }

    /// 95% Wald intervals on the reporting scale.
    pub fn confidence_intervals(&self) -> Vec<Option<(f64, f64)>> {
        self.reported
            .iter()
            .zip(&self.standard_errors)
            .map(|(&e, se)| se.map(|s| (e - 1.959_963_984_540_054 * s, e + 1.959_963_984_540_054 * s)))
            .collect()
    }

    /// Estimate and standard error of a named parameter.
    pub fn get(&self, name: &str) -> Option<(f64, Option<f64>)> {
        let i = self.parameter_names.iter().position(|n| n == name)?;
        Some((self.reported[i], self.standard_errors[i]))
    }

    /// Mean posterior probability per class.
    pub fn class_shares(&self) -> Vec<f64> {
        let k = self.spec.n_classes;
        let n = self.posterior.len().max(1) as f64;
        (0..k).map(|c| self.posterior.iter().map(|r| r[c]).sum::<f64>() / n).collect()
    }

    /// Modal class per individual.
    pub fn modal_classes(&self) -> Vec<usize> {
        crate::classification::modal_assignment(&self.posterior)
    }
}

/// Reorders classes by ascending marginal baseline mean of the outcome.
pub fn relabel_by_baseline(theta: &ModelParameters) -> ModelParameters {
    let means = theta.baseline_means();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    theta.permuted(&order)
}

struct Problem<'a, 'b> {
    obj: &'b mut CachedObjective<'a>,
    steps_scale: Vec<f64>,
    knot: Vec<bool>,
    mask: Vec<bool>,
}

impl Problem<'_, '_> {
    fn steps(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.steps_scale)
            .zip(&self.knot)
            .map(|((v, s), &k)| if k { KNOT_GRADIENT_STEP } else { s * (1.0 + v.abs()) })
            .collect()
    }
}

impl Objective for Problem<'_, '_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.obj.set_base(x)
    }

    fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
        if self.obj.base_value().is_nan() || !self.obj.base_value().is_finite() {
            self.obj.set_base(x);
        }
        let steps = self.steps(x);
        self.obj.score_gradient(&steps, &self.mask)
    }
}

fn optimise(obj: &mut CachedObjective<'_>, layout: &ParameterLayout, v0: &[f64], opts: &FitOptions) -> BfgsOutcome {
    let n = layout.len();
    let knot: Vec<bool> = (0..n).map(|i| layout.is_nonsmooth(i)).collect();
    let has_knot = knot.iter().any(|&k| k);
    let base = BfgsOptions {
        max_iterations: opts.max_iterations,
        f_rel_tol: opts.f_rel_tol,
        grad_tol: opts.grad_tol,
        ignore_in_grad_test: knot.clone(),
        ..BfgsOptions::default()
    };
    let mut problem = Problem { obj, steps_scale: vec![1e-5; n], knot: knot.clone(), mask: vec![true; n] };
    let first = minimize_bfgs(&mut problem, v0, &base);
    if !has_knot || first.stop == BfgsStop::NonFinite {
        return first;
    }
    // Polish the smooth coordinates with the knots held at their estimates.
    let free: Vec<bool> = knot.iter().map(|k| !k).collect();
    problem.mask = free.clone();
    let polish = BfgsOptions { free, ..base };
    let mut second = minimize_bfgs(&mut problem, &first.x, &polish);
    second.iterations += first.iterations;
    second
}

fn jitter(v: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            x * (1.0 + 0.25 * z)
        })
        .collect()
}

fn posterior_from(obj: &CachedObjective<'_>, k_n: usize) -> Vec<Vec<f64>> {
    let (cols, log_pi) = obj.base_pieces();
    let n = cols[0].len();
    (0..n)
        .map(|i| {
            let terms: Vec<f64> = (0..k_n).map(|k| cols[k][i] + log_pi[i * k_n + k]).collect();
            let lse = log_sum_exp(terms.iter().copied());
            let mut row: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            row
        })
        .collect()
}

fn hessian_steps(layout: &ParameterLayout, v: &[f64]) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(i, x)| if layout.is_nonsmooth(i) { KNOT_HESSIAN_STEP } else { 1e-4 * (1.0 + x.abs()) })
        .collect()
}

/// Wald standard errors on the reporting scale from the Hessian of the
/// negative log-likelihood (differenced scores) at `v` (delta method through the reporting map).
fn wald(obj: &mut CachedObjective<'_>, layout: &ParameterLayout, v: &[f64]) -> Option<Vec<f64>> {
    obj.set_base(v);
    let fd: Vec<f64> = (0..v.len()).map(|i| if layout.is_nonsmooth(i) { KNOT_GRADIENT_STEP } else { 0.0 }).collect();
    let h = obj.hessian_from_scores(&hessian_steps(layout, v), &fd)?;
    let chol = h.clone().cholesky()?;
    let cov = chol.inverse();
    let n = v.len();
    let report = |w: &[f64]| unpack_parameters(w, layout).map(|t| reporting_vector(&t, layout));
    let mut jac = DMatrix::zeros(n, n);
    let mut w = v.to_vec();
    for c in 0..n {
        let h = 1e-6 * (1.0 + v[c].abs());
        w[c] = v[c] + h;
        let up = report(&w).ok()?;
        w[c] = v[c] - h;
        let dn = report(&w).ok()?;
        w[c] = v[c];
        for r in 0..n {
            jac[(r, c)] = (up[r] - dn[r]) / (2.0 * h);
        }
    }
    let rc = &jac * cov * jac.transpose();
    (0..n).map(|i| (rc[(i, i)] >= 0.0).then(|| rc[(i, i)].sqrt())).collect()
}

/// Wald standard errors of `theta` on the reporting scale, aligned with
/// [`parameter_names`], under the objective configured by `options`. Fails
/// when the Hessian is not positive definite.
pub fn standard_errors(
    ds: &LongitudinalDataset,
    spec: &ModelSpec,
    theta: &ModelParameters,
    options: &FitOptions,
) -> Result<Vec<f64>> {
    let layout = ParameterLayout::new(spec, ds.n_occasions())?;
    let data = PreparedData::new(ds, spec)?;
    let v = pack_parameters(theta, &layout)?;
    let mut obj = CachedObjective::new(&data, &layout).with_gating_ridge(options.gating_ridge);
    if !obj.set_base(&v).is_finite() {
        return Err(Error::Infeasible("log-likelihood is not finite".into()));
    }
    wald(&mut obj, &layout, &v).ok_or_else(|| Error::FitFailed("Hessian is not positive definite".into()))
}

struct Attempt {
    v: Vec<f64>,
    value: f64,
    outcome: BfgsOutcome,
    reason: Option<String>,
}

/// Fits `spec` to `ds` by maximum likelihood with up to `max_attempts` starts.
///
/// Never panics on numerical trouble: an exhausted attempt budget yields a
/// `Failed` status carrying the best attempt.
pub fn fit(ds: &LongitudinalDataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    let j_n = ds.n_occasions();
    let layout = ParameterLayout::new(spec, j_n)?;
    let data = PreparedData::new(ds, spec)?;
    if options.max_attempts == 0 {
        return Err(Error::Parameter("max_attempts must be at least 1".into()));
    }
    let mut obj = CachedObjective::new(&data, &layout).with_gating_ridge(options.gating_ridge);
    let mut best: Option<Attempt> = None;
    let mut winner: Option<(Attempt, usize)> = None;

    for attempt in 0..options.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(attempt as u64);
        let theta0 = match &options.start {
            StartStrategy::KMeans => kmeans_start(ds, spec, rng.gen())?,
            StartStrategy::Given(t) => t.clone(),
        };
        let packed = pack_parameters(&theta0, &layout)?;
        let mut v0 = packed.clone();
        if attempt > 0 {
            for _ in 0..20 {
                v0 = jitter(&packed, &mut rng);
                if obj.set_base(&v0).is_finite() {
                    break;
                }
            }
        }
        if !obj.set_base(&v0).is_finite() {
            let a = Attempt { v: v0.clone(), value: f64::INFINITY, outcome: dummy_outcome(&v0), reason: Some("infeasible start".into()) };
            best = best.or(Some(a));
            continue;
        }
        let outcome = optimise(&mut obj, &layout, &v0, options);
        let relabeled = unpack_parameters(&outcome.x, &layout).map(|t| relabel_by_baseline(&t));
        let v = match relabeled.and_then(|t| pack_parameters(&t, &layout)) {
            Ok(v) => v,
            Err(e) => {
                let a = Attempt { v: outcome.x.clone(), value: outcome.value, outcome, reason: Some(e.to_string()) };
                best = keep_better(best, a);
                continue;
            }
        };
        let value = obj.set_base(&v);
        let stationary = outcome.grad_norm(&BfgsOptions {
            ignore_in_grad_test: (0..layout.len()).map(|i| layout.is_nonsmooth(i)).collect(),
            ..BfgsOptions::default()
        }) < options.grad_tol;
        let mut reason = match outcome.stop {
            BfgsStop::Converged => None,
            BfgsStop::LineSearchFailed if stationary => None,
            other => Some(format!("optimizer stopped: {other:?}")),
        };
        if reason.is_none() {
            let post = posterior_from(&obj, spec.n_classes);
            let n = post.len() as f64;
            for k in 0..spec.n_classes {
                let share = post.iter().map(|r| r[k]).sum::<f64>() / n;
                if share < options.min_class_share {
                    reason = Some(format!("class {} has expected share {share:.4}", k + 1));
                }
            }
        }
        let a = Attempt { v, value, outcome, reason };
        if a.reason.is_none() {
            winner = Some((a, attempt + 1));
            break;
        }
        best = keep_better(best, a);
    }

    let (attempt, status_attempts, mut converged) = match winner {
        Some((a, n)) => (a, n, true),
        None => (best.expect("at least one attempt ran"), options.max_attempts, false),
    };
    let theta = unpack_parameters(&attempt.v, &layout)?;
    let value = obj.set_base(&attempt.v);
    let mut reason = attempt.reason.clone();
    let posterior = if value.is_finite() {
        posterior_from(&obj, spec.n_classes)
    } else {
        vec![vec![f64::NAN; spec.n_classes]; data.len()]
    };
    let mut ses = vec![None; layout.len()];
    if converged && options.compute_standard_errors {
        match wald(&mut obj, &layout, &attempt.v) {
            Some(se) => ses = se.into_iter().map(Some).collect(),
            None => {
                converged = false;
                reason = Some("Hessian is not positive definite".into());
            }
        }
    }
    let loglik = -(value - obj.penalty(&attempt.v));
    let p = layout.len();
    let n = data.len() as f64;
    Ok(FitResult {
        spec: spec.clone(),
        n_occasions: j_n,
        n_individuals: data.len(),
        reported: reporting_vector(&theta, &layout),
        estimates: theta,
        parameter_names: parameter_names(&layout),
        standard_errors: ses,
        loglik,
        aic: -2.0 * loglik + 2.0 * p as f64,
        bic: -2.0 * loglik + p as f64 * n.ln(),
        n_free_parameters: p,
        posterior,
        status: if converged {
            FitStatus::Converged { attempts: status_attempts }
        } else {
            FitStatus::Failed { attempts: status_attempts, reason: reason.unwrap_or_else(|| "not converged".into()) }
        },
        iterations: attempt.outcome.iterations,
        gradient_norm: attempt.outcome.gradient.iter().enumerate().filter(|(i, _)| !layout.is_nonsmooth(*i)).map(|(_, g)| g.abs()).fold(0.0, f64::max),
    })
}

fn dummy_outcome(v: &[f64]) -> BfgsOutcome {
    BfgsOutcome {
        x: v.to_vec(),
        value: f64::INFINITY,
        gradient: vec![f64::NAN; v.len()],
        iterations: 0,
        stop: BfgsStop::NonFinite,
        last_rel_change: f64::NAN,
    }
}

fn keep_better(best: Option<Attempt>, a: Attempt) -> Option<Attempt> {
    match best {
        Some(b) if !(a.value < b.value) => Some(b),
        _ => Some(a),
    }
}
