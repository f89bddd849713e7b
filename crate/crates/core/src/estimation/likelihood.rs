//! Per-individual Gaussian log-densities under each class, logistic gating,
//! and the mixture log-likelihood.

use nalgebra::DMatrix;

use super::packing::{unpack_class, unpack_gating, ParameterLayout};
use super::{GatingParameters, ModelParameters, ModelSpec};
use crate::data::{Individual, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::moments::{ClassParameters, PreparedClass, MAX_LATENT};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observed entries of one individual in the `(x_1..x_J, y_1..y_J, x_e)` layout.
#[derive(Debug, Clone)]
pub(crate) struct PreparedIndividual {
    pub times: Vec<f64>,
    pub idx: Vec<usize>,
    pub values: Vec<f64>,
    pub xg: Vec<f64>,
}

impl PreparedIndividual {
    pub fn new(ind: &Individual, spec: &ModelSpec) -> Self {
        let j_n = ind.n_occasions();
        let mut idx = Vec::with_capacity(2 * j_n + 1);
        let mut values = Vec::with_capacity(2 * j_n + 1);
        if spec.use_tvc {
            for (j, v) in ind.x.iter().enumerate() {
                if let Some(v) = v {
                    idx.push(j);
                    values.push(*v);
                }
            }
        }
        for (j, v) in ind.y.iter().enumerate() {
            if let Some(v) = v {
                idx.push(j_n + j);
                values.push(*v);
            }
        }
        if spec.use_tic {
            idx.push(2 * j_n);
            values.push(ind.xe);
        }
        Self {
            times: ind.times.clone(),
            idx,
            values,
            xg: ind.xg[..spec.n_gating_tics].to_vec(),
        }
    }
}

/// Dataset in the form consumed by the likelihood kernel.
#[derive(Debug, Clone)]
pub(crate) struct PreparedData {
    pub individuals: Vec<PreparedIndividual>,
}

impl PreparedData {
    pub fn new(ds: &LongitudinalDataset, spec: &ModelSpec) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data { row: 0, msg: "dataset is empty".into() });
        }
        ds.validate()?;
        Ok(Self {
            individuals: ds.individuals.iter().map(|i| PreparedIndividual::new(i, spec)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }
}

/// Scratch buffers reused across individuals.
#[derive(Debug, Default)]
pub(crate) struct Workspace {
    a: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
    e: Vec<f64>,
    li: Vec<f64>,
    w: Vec<f64>,
    wa: Vec<f64>,
    ap: Vec<f64>,
    am: Vec<f64>,
}

/// Builds the observed covariance, factors it in place and whitens the
/// residual. Leaves the design in `ws.a`, the Cholesky factor in `ws.s` and
/// `L^-1 (y - mu)` in `ws.e`. Returns `(log det L, squared norm)`, or `None`
/// when the covariance is not positive definite.
fn factor(pc: &PreparedClass, ind: &PreparedIndividual, ws: &mut Workspace) -> Option<(f64, f64)> {
    let j_n = ind.times.len();
    let l = pc.n_latent();
    let n = ind.idx.len();
    ws.a.resize((2 * j_n + 1) * l, 0.0);
    ws.b.resize(n * l, 0.0);
    ws.s.resize(n * n, 0.0);
    ws.e.resize(n, 0.0);
    pc.fill_design(&ind.times, &mut ws.a);

    for (p, &op) in ind.idx.iter().enumerate() {
        let row = &ws.a[op * l..(op + 1) * l];
        let mut mean = 0.0;
        for k in 0..l {
            mean += row[k] * pc.mean[k];
        }
        ws.e[p] = ind.values[p] - mean;
        let brow = &mut ws.b[p * l..(p + 1) * l];
        for c in 0..l {
            let mut acc = 0.0;
            for k in 0..l {
                acc += row[k] * pc.cov[k][c];
            }
            brow[c] = acc;
        }
    }
    for p in 0..n {
        let brow = &ws.b[p * l..(p + 1) * l];
        for q in 0..=p {
            let oq = ind.idx[q];
            let arow = &ws.a[oq * l..(oq + 1) * l];
            let mut acc = pc.residual(j_n, ind.idx[p], oq);
            for k in 0..l {
                acc += brow[k] * arow[k];
            }
            ws.s[p * n + q] = acc;
        }
    }

    // In-place Cholesky (lower triangle, row-major).
    let s = &mut ws.s;
    let mut logdet = 0.0;
    for p in 0..n {
        for q in 0..=p {
            let mut acc = s[p * n + q];
            for k in 0..q {
                acc -= s[p * n + k] * s[q * n + k];
            }
            if p == q {
                if !(acc > 0.0) || !acc.is_finite() {
                    return None;
                }
                let d = acc.sqrt();
                s[p * n + p] = d;
                logdet += d.ln();
            } else {
                s[p * n + q] = acc / s[q * n + q];
            }
        }
    }
    let mut quad = 0.0;
    for p in 0..n {
        let mut acc = ws.e[p];
        for k in 0..p {
            acc -= s[p * n + k] * ws.e[k];
        }
        let z = acc / s[p * n + p];
        ws.e[p] = z;
        quad += z * z;
    }
    Some((logdet, quad))
}

/// Gaussian log-density of the observed entries; `-inf` when the implied
/// covariance is not positive definite.
pub(crate) fn kernel(pc: &PreparedClass, ind: &PreparedIndividual, ws: &mut Workspace) -> f64 {
    let n = ind.idx.len();
    if n == 0 {
        return 0.0;
    }
    match factor(pc, ind, ws) {
        Some((logdet, quad)) => -0.5 * (n as f64 * LN_2PI + quad) - logdet,
        None => f64::NEG_INFINITY,
    }
}

/// Weighted derivatives of class log-densities with respect to the latent
/// mean, latent covariance and the three residual parameters.
#[derive(Debug, Clone, Default)]
struct ScoreAcc {
    gm: [f64; MAX_LATENT],
    gc: [[f64; MAX_LATENT]; MAX_LATENT],
    gr: [f64; 3],
}

/// Coordinate whose perturbation changes the design, with the prepared class
/// on either side of a central difference of half-width `h`.
struct DesignShift {
    coord: usize,
    plus: PreparedClass,
    minus: PreparedClass,
    h: f64,
}

/// Adds `weight` times the score of one individual under `pc` to `acc`, and the
/// design part of the derivative along each shift to `grad[shift.coord]`.
///
/// With `a = S^-1 (y - mu)` and `W = S^-1 - a a'`, the differential of the
/// log-density is `a' dmu - tr(W dS) / 2`.
fn kernel_score(
    pc: &PreparedClass,
    ind: &PreparedIndividual,
    ws: &mut Workspace,
    weight: f64,
    acc: &mut ScoreAcc,
    shifts: &[DesignShift],
    grad: &mut [f64],
) -> bool {
    let n = ind.idx.len();
    if n == 0 {
        return true;
    }
    if factor(pc, ind, ws).is_none() {
        return false;
    }
    let j_n = ind.times.len();
    let l = pc.n_latent();
    let s = &ws.s;
    // a = L^-T z, in place.
    for p in (0..n).rev() {
        let mut v = ws.e[p];
        for k in p + 1..n {
            v -= s[k * n + p] * ws.e[k];
        }
        ws.e[p] = v / s[p * n + p];
    }
    // L^-1 by forward substitution, then W = L^-T L^-1 - a a'.
    ws.li.clear();
    ws.li.resize(n * n, 0.0);
    for c in 0..n {
        ws.li[c * n + c] = 1.0 / s[c * n + c];
        for p in c + 1..n {
            let mut v = 0.0;
            for k in c..p {
                v -= s[p * n + k] * ws.li[k * n + c];
            }
            ws.li[p * n + c] = v / s[p * n + p];
        }
    }
    ws.w.resize(n * n, 0.0);
    for p in 0..n {
        for q in 0..=p {
            let mut v = 0.0;
            for k in p..n {
                v += ws.li[k * n + p] * ws.li[k * n + q];
            }
            v -= ws.e[p] * ws.e[q];
            ws.w[p * n + q] = v;
            ws.w[q * n + p] = v;
        }
    }
    // WA over observed rows.
    ws.wa.resize(n * l, 0.0);
    for p in 0..n {
        for k in 0..l {
            let mut v = 0.0;
            for q in 0..n {
                v += ws.w[p * n + q] * ws.a[ind.idx[q] * l + k];
            }
            ws.wa[p * l + k] = v;
        }
    }
    for p in 0..n {
        let row = &ws.a[ind.idx[p] * l..(ind.idx[p] + 1) * l];
        let ap = weight * ws.e[p];
        for k in 0..l {
            acc.gm[k] += ap * row[k];
            let hr = -0.5 * weight * row[k];
            for c in 0..l {
                acc.gc[k][c] += hr * ws.wa[p * l + c];
            }
        }
        for q in 0..=p {
            let (op, oq) = (ind.idx[p], ind.idx[q]);
            if op == 2 * j_n || oq == 2 * j_n || op % j_n != oq % j_n {
                continue;
            }
            let w = ws.w[p * n + q];
            match (op / j_n, oq / j_n) {
                (0, 0) => acc.gr[0] -= 0.5 * weight * w,
                (1, 1) => acc.gr[1] -= 0.5 * weight * w,
                _ => acc.gr[2] -= weight * w,
            }
        }
    }
    if shifts.is_empty() {
        return true;
    }
    // G_A = a m' - W A C, contracted with the design differences.
    let rows = 2 * j_n + 1;
    ws.ap.resize(rows * l, 0.0);
    ws.am.resize(rows * l, 0.0);
    ws.b.resize(n * l, 0.0);
    for p in 0..n {
        for k in 0..l {
            let mut v = ws.e[p] * pc.mean[k];
            for c in 0..l {
                v -= ws.wa[p * l + c] * pc.cov[c][k];
            }
            ws.b[p * l + k] = v;
        }
    }
    for sh in shifts {
        sh.plus.fill_design(&ind.times, &mut ws.ap);
        sh.minus.fill_design(&ind.times, &mut ws.am);
        let mut v = 0.0;
        for p in 0..n {
            let o = ind.idx[p] * l;
            for k in 0..l {
                v += ws.b[p * l + k] * (ws.ap[o + k] - ws.am[o + k]);
            }
        }
        grad[sh.coord] += weight * v / (2.0 * sh.h);
    }
    true
}

fn design_differs(a: &PreparedClass, b: &PreparedClass) -> bool {
    a.form != b.form || a.rates != b.rates || a.kappa != b.kappa || a.beta_tic != b.beta_tic || a.beta_tvc != b.beta_tvc
}

fn check_gating(xg: &[f64], gating: &GatingParameters) -> Result<()> {
    if gating.coefficients.len() != gating.intercepts.len() {
        return Err(Error::Dimension("gating intercepts and coefficients differ in count".into()));
    }
    if gating.coefficients.iter().any(|c| c.len() != xg.len()) {
        return Err(Error::Dimension(format!(
            "gating coefficients do not match {} covariates",
            xg.len()
        )));
    }
    Ok(())
}

pub(crate) fn log_softmax_into(gating: &GatingParameters, xg: &[f64], out: &mut [f64]) {
    let k_n = gating.n_classes();
    let mut max = f64::NEG_INFINITY;
    for (k, o) in out.iter_mut().enumerate().take(k_n) {
        *o = gating.score(k, xg);
        max = max.max(*o);
    }
    let lse = max + out[..k_n].iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    out[..k_n].iter_mut().for_each(|s| *s -= lse);
}

/// Log mixing probabilities for first-type covariates `xg`.
pub fn log_gating_probabilities(xg: &[f64], gating: &GatingParameters) -> Result<Vec<f64>> {
    check_gating(xg, gating)?;
    let mut out = vec![0.0; gating.n_classes()];
    log_softmax_into(gating, xg, &mut out);
    Ok(out)
}

/// Mixing probabilities for first-type covariates `xg`.
pub fn gating_probabilities(xg: &[f64], gating: &GatingParameters) -> Result<Vec<f64>> {
    Ok(log_gating_probabilities(xg, gating)?.into_iter().map(f64::exp).collect())
}

fn check_class(params: &ClassParameters, spec: &ModelSpec, times: &[f64]) -> Result<()> {
    if params.form.kind() != spec.form {
        return Err(Error::Parameter("class form differs from spec".into()));
    }
    params.validate(times.len())?;
    params.form.validate_for(times)
}

/// Log-density of one individual's observed entries under one class.
///
/// Missing `x`/`y` cells are dropped (FIML). Which blocks enter is governed by
/// `spec.use_tvc` / `spec.use_tic`. Returns `-inf` when the implied covariance
/// is not positive definite.
pub fn class_loglik(ind: &Individual, params: &ClassParameters, spec: &ModelSpec) -> Result<f64> {
    check_class(params, spec, &ind.times)?;
    let pc = PreparedClass::new(params, spec.decomposition);
    let pi = PreparedIndividual::new(ind, spec);
    Ok(kernel(&pc, &pi, &mut Workspace::default()))
}

pub(crate) fn class_column(
    pc: &PreparedClass,
    data: &PreparedData,
    out: &mut [f64],
    ws: &mut Workspace,
) {
    for (o, ind) in out.iter_mut().zip(&data.individuals) {
        *o = kernel(pc, ind, ws);
    }
}

/// `N x K` matrix of per-individual, per-class log-densities.
pub fn class_loglik_matrix(ds: &LongitudinalDataset, theta: &ModelParameters, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    theta.check_against(spec, ds.n_occasions())?;
    for ind in &ds.individuals {
        for c in &theta.classes {
            c.form.validate_for(&ind.times)?;
        }
    }
    let data = PreparedData::new(ds, spec)?;
    let mut m = DMatrix::zeros(data.len(), spec.n_classes);
    let mut ws = Workspace::default();
    let mut col = vec![0.0; data.len()];
    for (k, c) in theta.classes.iter().enumerate() {
        class_column(&PreparedClass::new(c, spec.decomposition), &data, &mut col, &mut ws);
        m.column_mut(k).copy_from_slice(&col);
    }
    Ok(m)
}

/// `N x K` matrix of log mixing probabilities.
pub(crate) fn log_gating_matrix(ds: &LongitudinalDataset, gating: &GatingParameters, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(ds.len(), spec.n_classes);
    let mut buf = vec![0.0; spec.n_classes];
    for (i, ind) in ds.individuals.iter().enumerate() {
        let xg = &ind.xg[..spec.n_gating_tics];
        check_gating(xg, gating)?;
        log_softmax_into(gating, xg, &mut buf);
        for k in 0..spec.n_classes {
            m[(i, k)] = buf[k];
        }
    }
    Ok(m)
}

#[inline]
pub(crate) fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Observed-data log-likelihood of the mixture, `-inf` at infeasible parameters.
pub fn mixture_loglik(ds: &LongitudinalDataset, theta: &ModelParameters, spec: &ModelSpec) -> Result<f64> {
    let ll = class_loglik_matrix(ds, theta, spec)?;
    let lp = log_gating_matrix(ds, &theta.gating, spec)?;
    Ok((0..ds.len())
        .map(|i| log_sum_exp((0..spec.n_classes).map(|k| ll[(i, k)] + lp[(i, k)])))
        .sum())
}

/// Negative log-likelihood over the packed vector, with per-class column
/// caching so that a coordinate perturbation only recomputes what it touches.
pub(crate) struct CachedObjective<'a> {
    pub data: &'a PreparedData,
    pub layout: &'a ParameterLayout,
    ws: Workspace,
    base: Vec<f64>,
    cols: Vec<Vec<f64>>,
    log_pi: Vec<f64>,
    base_value: f64,
    scratch_col: Vec<f64>,
    scratch_pi: Vec<f64>,
    ridge: f64,
    pub evaluations: usize,
}

impl<'a> CachedObjective<'a> {
    pub fn new(data: &'a PreparedData, layout: &'a ParameterLayout) -> Self {
        let n = data.len();
        let k_n = layout.spec.n_classes;
        Self {
            data,
            layout,
            ws: Workspace::default(),
            base: Vec::new(),
            cols: vec![vec![0.0; n]; k_n],
            log_pi: vec![0.0; n * k_n],
            base_value: f64::NAN,
            scratch_col: vec![0.0; n],
            scratch_pi: vec![0.0; n * k_n],
            ridge: 0.0,
            evaluations: 0,
        }
    }

    /// Adds `ridge * sum(gamma^2)` over the gating coordinates to the objective.
    pub fn with_gating_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    /// Penalty part of the objective at `v`.
    pub fn penalty(&self, v: &[f64]) -> f64 {
        if self.ridge == 0.0 {
            return 0.0;
        }
        self.ridge * v[self.layout.gating_start()..].iter().map(|g| g * g).sum::<f64>()
    }

    fn class_ok(&self, block: &[f64]) -> Option<PreparedClass> {
        if block.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let p = unpack_class(block, self.layout);
        if let Some(c) = p.form.coefficient() {
            if !c.is_finite() {
                return None;
            }
        }
        if let crate::model::FunctionalForm::BilinearSpline { knot } = p.form {
            // Knot must stay inside every individual's observed range.
            let inside = self.data.individuals.iter().all(|i| knot > i.times[0] && knot < i.times[i.times.len() - 1]);
            if !inside {
                return None;
            }
        }
        Some(PreparedClass::new(&p, self.layout.spec.decomposition))
    }

    fn fill_column(&mut self, v: &[f64], k: usize, out_scratch: bool) -> bool {
        let block = &v[self.layout.class_range(k)];
        let Some(pc) = self.class_ok(block) else {
            return false;
        };
        let target = if out_scratch { &mut self.scratch_col } else { &mut self.cols[k] };
        class_column(&pc, self.data, target, &mut self.ws);
        true
    }

    fn fill_log_pi(&self, v: &[f64], out: &mut [f64]) -> bool {
        if v[self.layout.gating_start()..].iter().any(|x| !x.is_finite()) {
            return false;
        }
        let gating = unpack_gating(v, self.layout);
        let k_n = self.layout.spec.n_classes;
        for (i, ind) in self.data.individuals.iter().enumerate() {
            log_softmax_into(&gating, &ind.xg, &mut out[i * k_n..(i + 1) * k_n]);
        }
        true
    }

    /// Combines columns (with `replace` substituting class `k`'s column) and
    /// the gating into the negative log-likelihood.
    fn combine(&self, replace: Option<(usize, &[f64])>, log_pi: &[f64]) -> f64 {
        let k_n = self.layout.spec.n_classes;
        let mut total = 0.0;
        for i in 0..self.data.len() {
            let terms = (0..k_n).map(|k| {
                let ll = match replace {
                    Some((r, col)) if r == k => col[i],
                    _ => self.cols[k][i],
                };
                ll + log_pi[i * k_n + k]
            });
            total += log_sum_exp(terms);
        }
        if total.is_finite() {
            -total
        } else {
            f64::INFINITY
        }
    }

    /// Full evaluation at `v`, which becomes the cached base point.
    pub fn set_base(&mut self, v: &[f64]) -> f64 {
        self.evaluations += 1;
        self.base = v.to_vec();
        let mut ok = true;
        for k in 0..self.layout.spec.n_classes {
            ok &= self.fill_column(v, k, false);
            if !ok {
                break;
            }
        }
        let mut lp = std::mem::take(&mut self.log_pi);
        ok = ok && self.fill_log_pi(v, &mut lp);
        self.log_pi = lp;
        self.base_value = if ok { self.combine(None, &self.log_pi) + self.penalty(v) } else { f64::INFINITY };
        if !self.base_value.is_finite() {
            self.base.clear();
        }
        self.base_value
    }

    pub fn base_value(&self) -> f64 {
        self.base_value
    }

    /// Value at `base + h e_i`, using the cache.
    pub fn value_shifted(&mut self, i: usize, h: f64) -> f64 {
        self.evaluations += 1;
        let mut v = std::mem::take(&mut self.base);
        let orig = v[i];
        v[i] = orig + h;
        let out = self.value_at_single(&v, i) + self.penalty(&v);
        v[i] = orig;
        self.base = v;
        out
    }

    /// Value at `v`, which differs from the base only in coordinate `i`.
    fn value_at_single(&mut self, v: &[f64], i: usize) -> f64 {
        match self.layout.class_of(i) {
            Some(k) => {
                if !self.fill_column(v, k, true) {
                    return f64::INFINITY;
                }
                let col = std::mem::take(&mut self.scratch_col);
                let out = self.combine(Some((k, &col)), &self.log_pi);
                self.scratch_col = col;
                out
            }
            None => {
                let mut lp = std::mem::take(&mut self.scratch_pi);
                let ok = self.fill_log_pi(v, &mut lp);
                let out = if ok { self.combine(None, &lp) } else { f64::INFINITY };
                self.scratch_pi = lp;
                out
            }
        }
    }

    /// Central-difference gradient at the base point.
    #[cfg(test)]
    pub fn gradient(&mut self, steps: &[f64], mask: &[bool]) -> Vec<f64> {
        (0..self.base.len()).map(|i| if mask[i] { self.fd_component(i, steps[i]) } else { 0.0 }).collect()
    }

    /// Gradient at the base point from the analytic score of each class.
    ///
    /// Class coordinates are chained through central differences of the cheap
    /// map from the packed block to the prepared class; coordinates flagged
    /// non-smooth use cached central differences with `fd_steps`.
    pub fn score_gradient(&mut self, fd_steps: &[f64], mask: &[bool]) -> Vec<f64> {
        let n_par = self.base.len();
        let mut g = vec![0.0; n_par];
        if !self.base_value.is_finite() {
            return vec![f64::NAN; n_par];
        }
        let k_n = self.layout.spec.n_classes;
        let n = self.data.len();
        // Posterior weights and mixing probabilities.
        let mut post = vec![0.0; n * k_n];
        for i in 0..n {
            let lse = log_sum_exp((0..k_n).map(|k| self.cols[k][i] + self.log_pi[i * k_n + k]));
            for k in 0..k_n {
                post[i * k_n + k] = (self.cols[k][i] + self.log_pi[i * k_n + k] - lse).exp();
            }
        }
        for k in 0..k_n {
            let range = self.layout.class_range(k);
            let mut block = self.base[range.clone()].to_vec();
            let pc = PreparedClass::new(&unpack_class(&block, self.layout), self.layout.spec.decomposition);
            let mut deltas = Vec::new();
            let mut shifts = Vec::new();
            for (j, coord) in range.clone().enumerate() {
                if !mask[coord] || self.layout.is_nonsmooth(coord) {
                    continue;
                }
                let orig = block[j];
                let h = 1e-6 * (1.0 + orig.abs());
                block[j] = orig + h;
                let plus = PreparedClass::new(&unpack_class(&block, self.layout), self.layout.spec.decomposition);
                block[j] = orig - h;
                let minus = PreparedClass::new(&unpack_class(&block, self.layout), self.layout.spec.decomposition);
                block[j] = orig;
                deltas.push((coord, prepared_delta(&plus, &minus, h)));
                if design_differs(&plus, &pc) || design_differs(&minus, &pc) {
                    shifts.push(DesignShift { coord, plus, minus, h });
                }
            }
            let mut acc = ScoreAcc::default();
            for (i, ind) in self.data.individuals.iter().enumerate() {
                let w = post[i * k_n + k];
                if w < 1e-15 {
                    continue;
                }
                if !kernel_score(&pc, ind, &mut self.ws, w, &mut acc, &shifts, &mut g) {
                    return vec![f64::NAN; n_par];
                }
            }
            for (coord, d) in deltas {
                let mut v = g[coord];
                for a in 0..MAX_LATENT {
                    v += acc.gm[a] * d.gm[a];
                    for b in 0..MAX_LATENT {
                        v += acc.gc[a][b] * d.gc[a][b];
                    }
                }
                for r in 0..3 {
                    v += acc.gr[r] * d.gr[r];
                }
                g[coord] = -v;
            }
        }
        // Gating: d(-l)/d score_k = -(w_ik - pi_ik).
        let gs = self.layout.gating_start();
        let glen = self.layout.gating_len;
        for k in 1..k_n {
            for (i, ind) in self.data.individuals.iter().enumerate() {
                let r = post[i * k_n + k] - self.log_pi[i * k_n + k].exp();
                let base = gs + (k - 1) * glen;
                g[base] -= r;
                for (c, x) in ind.xg.iter().enumerate() {
                    g[base + 1 + c] -= r * x;
                }
            }
        }
        for (i, gi) in g.iter_mut().enumerate().skip(gs) {
            *gi += 2.0 * self.ridge * self.base[i];
        }
        for i in 0..n_par {
            if !mask[i] {
                g[i] = 0.0;
            } else if self.layout.is_nonsmooth(i) {
                g[i] = self.fd_component(i, fd_steps[i]);
            }
        }
        g
    }

    fn fd_component(&mut self, i: usize, h: f64) -> f64 {
        let fp = self.value_shifted(i, h);
        let fm = self.value_shifted(i, -h);
        if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() {
            (fp - self.base_value) / h
        } else if fm.is_finite() {
            (self.base_value - fm) / h
        } else {
            f64::NAN
        }
    }

    /// Hessian from central differences of [`Self::score_gradient`]; the base
    /// point is restored afterwards. `None` when a perturbed point is
    /// infeasible or an entry is not finite.
    pub fn hessian_from_scores(&mut self, steps: &[f64], fd_steps: &[f64]) -> Option<DMatrix<f64>> {
        let v = self.base.clone();
        let n = v.len();
        let mask = vec![true; n];
        let mut h = DMatrix::zeros(n, n);
        let mut w = v.clone();
        let mut ok = true;
        for i in 0..n {
            w[i] = v[i] + steps[i];
            ok &= self.set_base(&w).is_finite();
            let gp = self.score_gradient(fd_steps, &mask);
            w[i] = v[i] - steps[i];
            ok &= self.set_base(&w).is_finite();
            let gm = self.score_gradient(fd_steps, &mask);
            w[i] = v[i];
            if !ok {
                break;
            }
            for j in 0..n {
                h[(i, j)] = (gp[j] - gm[j]) / (2.0 * steps[i]);
            }
        }
        self.set_base(&v);
        if !ok {
            return None;
        }
        let h = (&h + h.transpose()) * 0.5;
        h.iter().all(|x| x.is_finite()).then_some(h)
    }

    /// Per-individual, per-class log-densities and log mixing weights at the base.
    pub fn base_pieces(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.cols, &self.log_pi)
    }
}

/// Central difference of the prepared-class quantities that enter the score.
fn prepared_delta(plus: &PreparedClass, minus: &PreparedClass, h: f64) -> ScoreAcc {
    let mut d = ScoreAcc::default();
    let s = 0.5 / h;
    for a in 0..MAX_LATENT {
        d.gm[a] = (plus.mean[a] - minus.mean[a]) * s;
        for b in 0..MAX_LATENT {
            d.gc[a][b] = (plus.cov[a][b] - minus.cov[a][b]) * s;
        }
    }
    d.gr = [
        (plus.theta_x - minus.theta_x) * s,
        (plus.theta_y - minus.theta_y) * s,
        (plus.theta_xy - minus.theta_xy) * s,
    ];
    d
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FormKind, FunctionalForm, RelativeRates, TvcDecomposition};
    use crate::moments::implied_moments;
    use crate::moments::tests::demo_class;
    use crate::model::Occasions;

    /// Dense Gaussian log-density via nalgebra's Cholesky and explicit inverse.
    fn dense_logpdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
        let n = x.len();
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        let d = nalgebra::DVector::from_fn(n, |i, _| x[i] - mean[i]);
        let q = (d.transpose() * inv * &d)[(0, 0)];
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + q)
    }

    fn individual(times: Vec<f64>, y: Vec<Option<f64>>, x: Vec<Option<f64>>, xe: f64) -> Individual {
        Individual { id: "a".into(), times, y, x, xe, xg: [0.3, -0.2], label: None }
    }

    fn check_against_dense(p: &ClassParameters, ind: &Individual, spec: &ModelSpec) {
        let occ = Occasions::new(ind.times.clone()).unwrap();
        let m = implied_moments(p, &occ, spec.decomposition).unwrap();
        let pi = PreparedIndividual::new(ind, spec);
        let mean: Vec<f64> = pi.idx.iter().map(|&i| m.mean[i]).collect();
        let cov = DMatrix::from_fn(pi.idx.len(), pi.idx.len(), |a, b| m.cov[(pi.idx[a], pi.idx[b])]);
        let want = dense_logpdf(&pi.values, &mean, &cov);
        let got = class_loglik(ind, p, spec).unwrap();
        assert!(((got - want) / want).abs() < 1e-10, "{got} vs {want}");
    }

    fn linear_class(j: usize) -> ClassParameters {
        let spec = ModelSpec::full(1, FormKind::Linear, TvcDecomposition::IntervalSlopes);
        let mut p = super::super::default_class(&spec, j, 0.0);
        p.mu_x = 0.2;
        p.phi_x = 1.3;
        p.mu_eta_x = [0.5, 1.5];
        p.phi_eta_x = [[1.0, 0.2], [0.2, 0.5]];
        p.alpha_y = vec![10.0, 2.0];
        p.psi_eta_y = DMatrix::from_row_slice(2, 2, &[4.0, 0.5, 0.5, 1.0]);
        p.beta_tic = vec![0.4, 0.1];
        p.beta_tvc = vec![0.6, -0.2];
        p.kappa = 0.7;
        p.rho_bl = 0.3;
        p.theta_x = 0.8;
        p.theta_y = 1.2;
        p.theta_xy = 0.25;
        if j > 2 {
            p.rates = RelativeRates::new((0..j - 1).map(|k| 1.0 - 0.2 * k as f64).collect()).unwrap();
        }
        p
    }

    #[test]
    fn matches_dense_density_two_and_three_waves() {
        for decomp in [TvcDecomposition::IntervalSlopes, TvcDecomposition::IntervalChanges] {
            let spec = ModelSpec { decomposition: decomp, ..ModelSpec::full(1, FormKind::Linear, decomp) };
            let p2 = linear_class(2);
            let full2 = individual(vec![0.0, 1.1], vec![Some(11.0), Some(13.5)], vec![Some(0.1), Some(2.2)], 0.4);
            check_against_dense(&p2, &full2, &spec);
            let miss2 = individual(vec![0.0, 1.1], vec![Some(11.0), None], vec![None, Some(2.2)], 0.4);
            check_against_dense(&p2, &miss2, &spec);

            let p3 = linear_class(3);
            let full3 = individual(vec![-0.1, 0.9, 2.2], vec![Some(9.5), Some(13.5), Some(14.0)], vec![Some(0.1), Some(2.2), Some(2.9)], -1.0);
            check_against_dense(&p3, &full3, &spec);
            let miss3 = individual(vec![-0.1, 0.9, 2.2], vec![Some(9.5), Some(13.5), None], vec![Some(0.1), None, Some(2.9)], -1.0);
            check_against_dense(&p3, &miss3, &spec);
        }
    }

    #[test]
    fn bilinear_matches_dense_density() {
        let spec = ModelSpec::full(1, FormKind::BilinearSpline, TvcDecomposition::IntervalChanges);
        let p = demo_class(4);
        let ind = individual(
            vec![0.1, 0.9, 2.2, 2.8],
            vec![Some(45.0), Some(52.0), None, Some(60.0)],
            vec![Some(0.0), Some(4.0), Some(9.0), None],
            0.5,
        );
        check_against_dense(&p, &ind, &spec);
    }

    #[test]
    fn standard_normal_at_mean() {
        // Identity covariance: zero latent variance, unit residuals, x_e with phi = 1.
        let spec = ModelSpec::full(1, FormKind::Linear, TvcDecomposition::IntervalSlopes);
        let mut p = super::super::default_class(&spec, 2, 0.0);
        p.phi_eta_x = [[1e-300, 0.0], [0.0, 1e-300]];
        p.psi_eta_y = DMatrix::from_element(2, 2, 0.0);
        let ind = individual(vec![0.0, 1.0], vec![Some(0.0), Some(0.0)], vec![Some(0.0), Some(0.0)], 0.0);
        let pc = PreparedClass::new(&p, spec.decomposition);
        let got = kernel(&pc, &PreparedIndividual::new(&ind, &spec), &mut Workspace::default());
        assert!((got + 2.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn non_pd_is_negative_infinity() {
        let spec = ModelSpec::unconditional(1, FormKind::Linear);
        let mut p = super::super::default_class(&spec, 2, 0.0);
        p.theta_y = 0.0;
        p.psi_eta_y = DMatrix::from_element(2, 2, 0.0);
        let ind = individual(vec![0.0, 1.0], vec![Some(0.0), Some(1.0)], vec![None, None], 0.0);
        let pc = PreparedClass::new(&p, spec.decomposition);
        assert_eq!(kernel(&pc, &PreparedIndividual::new(&ind, &spec), &mut Workspace::default()), f64::NEG_INFINITY);
    }

    #[test]
    fn gating_examples() {
        let g = GatingParameters { intercepts: vec![0.0], coefficients: vec![vec![1.5f64.ln(), 1.7f64.ln()]] };
        let p = gating_probabilities(&[0.0, 0.0], &g).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let g = GatingParameters { intercepts: vec![0.775], coefficients: vec![vec![0.0, 0.0]] };
        let p = gating_probabilities(&[0.0, 0.0], &g).unwrap();
        let want = 1.0 / (1.0 + 0.775f64.exp());
        assert!((p[0] - want).abs() < 1e-15);
        assert!((p[0] - 0.3153).abs() < 1e-4);
        assert_eq!(gating_probabilities(&[0.1, 0.2], &GatingParameters::zeros(1, 2)).unwrap(), vec![1.0]);
        assert!(gating_probabilities(&[0.1], &GatingParameters::zeros(2, 2)).is_err());
    }

    fn small_dataset() -> LongitudinalDataset {
        let mut v = Vec::new();
        for i in 0..5 {
            let f = i as f64;
            v.push(Individual {
                id: format!("{i}"),
                times: vec![0.0, 1.0 + 0.05 * f, 2.0, 3.1],
                y: vec![Some(10.0 + f), Some(12.0), Some(14.0 - 0.3 * f), Some(16.0)],
                x: vec![Some(0.1 * f), Some(1.0), Some(1.5), Some(2.5 + 0.1 * f)],
                xe: 0.3 * f - 0.5,
                xg: [0.2 * f, -0.1 * f],
                label: None,
            });
        }
        LongitudinalDataset::new(v).unwrap()
    }

    fn two_class() -> (ModelSpec, ModelParameters) {
        let spec = ModelSpec::full(2, FormKind::Linear, TvcDecomposition::IntervalSlopes);
        let mut a = linear_class(4);
        a.alpha_y = vec![11.0, 1.5];
        let mut b = linear_class(4);
        b.alpha_y = vec![12.0, 2.5];
        b.kappa = 0.2;
        let g = GatingParameters { intercepts: vec![0.4], coefficients: vec![vec![0.5, -0.3]] };
        (spec, ModelParameters { classes: vec![a, b], gating: g })
    }

    #[test]
    fn mixture_matches_naive_summation() {
        let ds = small_dataset();
        let (spec, theta) = two_class();
        let got = mixture_loglik(&ds, &theta, &spec).unwrap();
        let mut want = 0.0;
        for ind in &ds.individuals {
            let pi = gating_probabilities(&ind.xg, &theta.gating).unwrap();
            let mut s = 0.0;
            for k in 0..2 {
                s += pi[k] * class_loglik(ind, &theta.classes[k], &spec).unwrap().exp();
            }
            want += s.ln();
        }
        assert!((got - want).abs() < 1e-9 * want.abs());
    }

    #[test]
    fn label_permutation_invariance() {
        let ds = small_dataset();
        let (spec, theta) = two_class();
        let a = mixture_loglik(&ds, &theta, &spec).unwrap();
        let b = mixture_loglik(&ds, &theta.permuted(&[1, 0]), &spec).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn identical_classes_collapse() {
        let ds = small_dataset();
        let (spec, mut theta) = two_class();
        theta.classes[1] = theta.classes[0].clone();
        theta.gating = GatingParameters::zeros(2, 2);
        let two = mixture_loglik(&ds, &theta, &spec).unwrap();
        let one_spec = spec.with_classes(1);
        let one = ModelParameters { classes: vec![theta.classes[0].clone()], gating: GatingParameters::zeros(1, 2) };
        let single = mixture_loglik(&ds, &one, &one_spec).unwrap();
        assert!((two - single).abs() < 1e-9 * single.abs());
        let direct: f64 = ds.individuals.iter().map(|i| class_loglik(i, &one.classes[0], &one_spec).unwrap()).sum();
        assert!((single - direct).abs() < 1e-9 * single.abs());
    }

    #[test]
    fn cached_objective_agrees_with_direct_evaluation() {
        let ds = small_dataset();
        let (spec, theta) = two_class();
        let layout = ParameterLayout::new(&spec, 4).unwrap();
        let v = super::super::pack_parameters(&theta, &layout).unwrap();
        let data = PreparedData::new(&ds, &spec).unwrap();
        let mut obj = CachedObjective::new(&data, &layout).with_gating_ridge(0.01);
        let f0 = obj.set_base(&v);
        assert!((f0 - obj.penalty(&v) + mixture_loglik(&ds, &theta, &spec).unwrap()).abs() < 1e-9);
        for i in [0, 7, layout.class_len + 3, layout.len() - 1] {
            let got = obj.value_shifted(i, 0.01);
            let mut w = v.clone();
            w[i] += 0.01;
            let t = super::super::unpack_parameters(&w, &layout).unwrap();
            let want = -mixture_loglik(&ds, &t, &spec).unwrap() + obj.penalty(&w);
            assert!((got - want).abs() < 1e-9 * want.abs(), "coord {i}");
        }
        let f_again = obj.set_base(&v);
        assert_eq!(f0, f_again);
    }

    #[test]
    fn central_gradient_agrees_with_forward_difference() {
        let ds = small_dataset();
        let (spec, theta) = two_class();
        let layout = ParameterLayout::new(&spec, 4).unwrap();
        let v = super::super::pack_parameters(&theta, &layout).unwrap();
        let data = PreparedData::new(&ds, &spec).unwrap();
        let mut obj = CachedObjective::new(&data, &layout);
        let f0 = obj.set_base(&v);
        let steps: Vec<f64> = v.iter().map(|x| 1e-5 * (1.0 + x.abs())).collect();
        let g = obj.gradient(&steps, &vec![true; v.len()]);
        for i in 0..v.len() {
            let h = 1e-7 * (1.0 + v[i].abs());
            let fwd = (obj.value_shifted(i, h) - f0) / h;
            let tol = 1e-4 * g[i].abs().max(1.0);
            assert!((g[i] - fwd).abs() < tol, "coord {i}: {} vs {}", g[i], fwd);
        }
    }

    fn assert_score_matches_differences(ds: &LongitudinalDataset, spec: &ModelSpec, theta: &ModelParameters) {
        let layout = ParameterLayout::new(spec, ds.n_occasions()).unwrap();
        let v = super::super::pack_parameters(theta, &layout).unwrap();
        let data = PreparedData::new(ds, spec).unwrap();
        let mut obj = CachedObjective::new(&data, &layout).with_gating_ridge(0.01);
        assert!(obj.set_base(&v).is_finite());
        let steps: Vec<f64> = v.iter().map(|x| 1e-5 * (1.0 + x.abs())).collect();
        let mask = vec![true; v.len()];
        let fd = obj.gradient(&steps, &mask);
        let an = obj.score_gradient(&steps, &mask);
        for i in 0..v.len() {
            let tol = 1e-5 * (1.0 + fd[i].abs());
            assert!((fd[i] - an[i]).abs() < tol, "coord {i}: fd {} vs score {}", fd[i], an[i]);
        }
    }

    #[test]
    fn score_gradient_matches_differences() {
        let ds = small_dataset();
        let (spec, theta) = two_class();
        assert_score_matches_differences(&ds, &spec, &theta);
        let spec = ModelSpec::full(2, FormKind::Linear, TvcDecomposition::IntervalChanges);
        assert_score_matches_differences(&ds, &spec, &theta);
    }

    #[test]
    fn score_gradient_matches_differences_bilinear_with_missing_cells() {
        let mut ds = small_dataset();
        ds.individuals[1].y[2] = None;
        ds.individuals[3].x[0] = None;
        for decomp in [TvcDecomposition::IntervalSlopes, TvcDecomposition::IntervalChanges] {
            let spec = ModelSpec::full(2, FormKind::BilinearSpline, decomp);
            let a = demo_class(4);
            let mut b = demo_class(4);
            b.alpha_y[0] += 3.0;
            b.form = FunctionalForm::BilinearSpline { knot: 1.7 };
            let g = GatingParameters { intercepts: vec![-0.3], coefficients: vec![vec![0.2, 0.4]] };
            let theta = ModelParameters { classes: vec![a, b], gating: g };
            assert_score_matches_differences(&ds, &spec, &theta);
        }
    }

    #[test]
    fn knot_outside_data_range_is_infeasible() {
        let ds = small_dataset();
        let spec = ModelSpec::unconditional(1, FormKind::BilinearSpline);
        let layout = ParameterLayout::new(&spec, 4).unwrap();
        let mut p = super::super::default_class(&spec, 4, 1.5);
        p.form = FunctionalForm::BilinearSpline { knot: 1.5 };
        let theta = ModelParameters { classes: vec![p], gating: GatingParameters::zeros(1, 0) };
        let mut v = super::super::pack_parameters(&theta, &layout).unwrap();
        let data = PreparedData::new(&ds, &spec).unwrap();
        let mut obj = CachedObjective::new(&data, &layout);
        assert!(obj.set_base(&v).is_finite());
        let last = v.len() - 1;
        v[last] = 5.0;
        assert_eq!(obj.set_base(&v), f64::INFINITY);
    }
}
