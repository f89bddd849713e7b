//! Starting values: k-means on per-individual OLS summaries, then
//! within-cluster moment estimates of every class parameter.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GatingParameters, ModelParameters, ModelSpec};
use crate::data::{Individual, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::model::{fill_tvc_cumulative, inverse_reparameterize, FormKind, FunctionalForm, RelativeRates};
use crate::moments::ClassParameters;

/// Lloyd's k-means with k-means++ seeding; returns a cluster label per point.
///
/// Several seedings are tried and the lowest within-cluster sum of squares kept.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if k <= 1 || n == 0 {
        return vec![0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..5 {
        let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.gen::<f64>() * total;
                let mut pick = n - 1;
                for (i, w) in d.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            } else {
                rng.gen_range(0..n)
            };
            centers.push(points[next].clone());
        }
        let mut labels = vec![0; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut bk = 0;
                let mut bd = f64::INFINITY;
                for (c, cen) in centers.iter().enumerate() {
                    let dd = dist(p, cen);
                    if dd < bd {
                        bd = dd;
                        bk = c;
                    }
                }
                if labels[i] != bk {
                    labels[i] = bk;
                    changed = true;
                }
            }
            for (c, cen) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (d, v) in cen.iter_mut().enumerate() {
                    *v = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| dist(p, &centers[l])).sum();
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.unwrap().1
}

/// Least squares `y ~ X`; `None` when underdetermined or singular.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    if x.nrows() < x.ncols() {
        return None;
    }
    let xtx = x.transpose() * x;
    let chol = xtx.cholesky()?;
    let b = chol.solve(&(x.transpose() * y));
    let sse = (y - x * &b).norm_squared();
    b.iter().all(|v| v.is_finite()).then_some((b, sse))
}

fn observed(times: &[f64], v: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    times.iter().zip(v).filter_map(|(t, v)| v.map(|v| (*t, v))).unzip()
}

fn line_summary(times: &[f64], v: &[Option<f64>]) -> Option<[f64; 2]> {
    let (t, y) = observed(times, v);
    let x = DMatrix::from_fn(t.len(), 2, |r, c| if c == 0 { 1.0 } else { t[r] });
    ols(&x, &DVector::from_vec(y)).map(|(b, _)| [b[0], b[1]])
}

/// Standardised per-individual summaries used to seed cluster memberships.
fn features(ds: &LongitudinalDataset, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<Option<f64>>> = ds
        .individuals
        .iter()
        .map(|ind| {
            let mut f: Vec<Option<f64>> = Vec::new();
            let y = line_summary(&ind.times, &ind.y);
            f.push(y.map(|v| v[0]));
            f.push(y.map(|v| v[1]));
            if spec.use_tvc {
                let x = line_summary(&ind.times, &ind.x);
                f.push(x.map(|v| v[0]));
                f.push(x.map(|v| v[1]));
            }
            f
        })
        .collect();
    let d = raw.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; d]; raw.len()];
    for c in 0..d {
        let vals: Vec<f64> = raw.iter().filter_map(|r| r[c]).collect();
        let n = vals.len().max(1) as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for (r, row) in raw.iter().enumerate() {
            out[r][c] = row[c].map_or(0.0, |v| (v - mean) / sd);
        }
    }
    out
}

/// Symmetric positive-definite repair by flooring eigenvalues.
fn make_pd(m: &DMatrix<f64>, floor_rel: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1e-6);
    let floor = (floor_rel * top).max(1e-6);
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(2) as f64;
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len().max(1) as f64).collect();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0)
    });
    (mean, cov)
}

/// Candidate values for the form coefficient.
fn coefficient_grid(kind: FormKind, ds: &LongitudinalDataset) -> Vec<f64> {
    let geo = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
    };
    match kind {
        FormKind::BilinearSpline => {
            let lo = ds.individuals.iter().map(|i| i.times[0]).fold(f64::NEG_INFINITY, f64::max);
            let hi = ds.individuals.iter().map(|i| i.times[i.times.len() - 1]).fold(f64::INFINITY, f64::min);
            let (a, b) = (lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo));
            (0..=40).map(|i| a + (b - a) * i as f64 / 40.0).collect()
        }
        FormKind::NegativeExponential => geo(0.05, 5.0, 30),
        FormKind::JenssBayley => geo(0.05, 5.0, 30).into_iter().map(|v| -v).collect(),
        _ => vec![0.0],
    }
}

struct GrowthFit {
    /// Outcome growth factors on the reporting scale, one row per usable member.
    eta: Vec<Vec<f64>>,
    owner: Vec<usize>,
    sse: f64,
    dof: usize,
}

fn growth_fit(members: &[&Individual], form: &FunctionalForm) -> GrowthFit {
    let c = form.n_factors();
    let mut out = GrowthFit { eta: Vec::new(), owner: Vec::new(), sse: 0.0, dof: 0 };
    let mut row = [0.0; 3];
    for (m, ind) in members.iter().enumerate() {
        let (t, y) = observed(&ind.times, &ind.y);
        let x = DMatrix::from_fn(t.len(), c, |r, k| {
            form.loading_row(t[r], &mut row);
            row[k]
        });
        let Some((b, sse)) = ols(&x, &DVector::from_vec(y)) else {
            continue;
        };
        let mut eta: Vec<f64> = b.iter().copied().collect();
        if let FunctionalForm::BilinearSpline { knot } = form {
            eta = inverse_reparameterize([eta[0], eta[1], eta[2]], *knot).to_vec();
        }
        out.eta.push(eta);
        out.owner.push(m);
        out.sse += sse;
        out.dof += t.len() - c;
    }
    out
}

fn choose_form(kind: FormKind, members: &[&Individual], grid: &[f64]) -> FunctionalForm {
    let mut best = (f64::INFINITY, FunctionalForm::from_kind(kind, grid[0]));
    for &g in grid {
        let form = FunctionalForm::from_kind(kind, g);
        let fit = growth_fit(members, &form);
        if fit.eta.len() * 2 < members.len() {
            continue;
        }
        // Compare on mean squared error so dropped members do not bias the choice.
        let mse = fit.sse / fit.dof.max(1) as f64;
        if mse < best.0 {
            best = (mse, form);
        }
    }
    best.1
}

fn tvc_rates(members: &[&Individual], j_n: usize) -> RelativeRates {
    let mut slope = vec![0.0; j_n - 1];
    let mut count = vec![0usize; j_n - 1];
    for ind in members {
        for j in 0..j_n - 1 {
            if let (Some(a), Some(b)) = (ind.x[j], ind.x[j + 1]) {
                slope[j] += (b - a) / (ind.times[j + 1] - ind.times[j]);
                count[j] += 1;
            }
        }
    }
    let mean: Vec<f64> = slope.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect();
    if !(mean[0].abs() > 1e-6) || mean.iter().any(|v| !v.is_finite()) {
        return RelativeRates::linear(j_n - 1);
    }
    RelativeRates::from_free(&mean[1..].iter().map(|m| m / mean[0]).collect::<Vec<_>>())
        .unwrap_or_else(|_| RelativeRates::linear(j_n - 1))
}

/// Moment-based class parameters from a set of members.
pub(crate) fn class_start(members: &[&Individual], spec: &ModelSpec, grid: &[f64]) -> ClassParameters {
    let j_n = members[0].n_occasions();
    let c = spec.form.n_factors();
    let mut p = super::default_class(spec, j_n, grid[0]);
    p.form = choose_form(spec.form, members, grid);
    let gf = growth_fit(members, &p.form);
    p.theta_y = (gf.sse / gf.dof.max(1) as f64).max(1e-2);

    // TVC growth per member.
    let mut eta_x: Vec<Option<[f64; 2]>> = vec![None; members.len()];
    if spec.use_tvc {
        p.rates = tvc_rates(members, j_n);
        let mut sse = 0.0;
        let mut dof = 0;
        let mut cum = vec![0.0; j_n];
        for (m, ind) in members.iter().enumerate() {
            fill_tvc_cumulative(&ind.times, p.rates.as_slice(), &mut cum);
            let rows: Vec<(f64, f64)> = cum.iter().zip(&ind.x).filter_map(|(c, v)| v.map(|v| (*c, v))).collect();
            let x = DMatrix::from_fn(rows.len(), 2, |r, k| if k == 0 { 1.0 } else { rows[r].0 });
            let y = DVector::from_fn(rows.len(), |r, _| rows[r].1);
            if let Some((b, s)) = ols(&x, &y) {
                eta_x[m] = Some([b[0], b[1]]);
                sse += s;
                dof += rows.len() - 2;
            }
        }
        p.theta_x = (sse / dof.max(1) as f64).max(1e-2);
        let rows: Vec<Vec<f64>> = eta_x.iter().flatten().map(|e| e.to_vec()).collect();
        if rows.len() >= 3 {
            let (mean, cov) = mean_cov(&rows);
            p.mu_eta_x = [mean[0], mean[1]];
            let cov = make_pd(&cov, 1e-2);
            p.phi_eta_x = [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]];
        }
    }
    if spec.use_tic {
        let xe: Vec<Vec<f64>> = members.iter().map(|i| vec![i.xe]).collect();
        let (m, v) = mean_cov(&xe);
        p.mu_x = m[0];
        p.phi_x = v[(0, 0)].max(1e-3);
    }
    if spec.use_tic && spec.use_tvc {
        let pairs: Vec<Vec<f64>> = members
            .iter()
            .zip(&eta_x)
            .filter_map(|(i, e)| e.map(|e| vec![i.xe, e[0]]))
            .collect();
        if pairs.len() >= 3 {
            let (_, cov) = mean_cov(&pairs);
            let r = cov[(0, 1)] / (cov[(0, 0)] * cov[(1, 1)]).sqrt();
            p.rho_bl = if r.is_finite() { r.clamp(-0.9, 0.9) } else { 0.0 };
        }
    }

    // Regress outcome growth factors on the covariates that enter the model.
    let mut design_rows = Vec::new();
    let mut targets = Vec::new();
    for (eta, &m) in gf.eta.iter().zip(&gf.owner) {
        let mut r = vec![1.0];
        if spec.use_tic {
            r.push(members[m].xe);
        }
        if spec.use_tvc {
            match eta_x[m] {
                Some(e) => r.push(e[0]),
                None => continue,
            }
        }
        design_rows.push(r);
        targets.push(eta.clone());
    }
    let q = 1 + spec.use_tic as usize + spec.use_tvc as usize;
    if design_rows.len() > q + c {
        let x = DMatrix::from_fn(design_rows.len(), q, |r, k| design_rows[r][k]);
        let mut resid = vec![vec![0.0; c]; design_rows.len()];
        for f in 0..c {
            let y = DVector::from_fn(targets.len(), |r, _| targets[r][f]);
            if let Some((b, _)) = ols(&x, &y) {
                p.alpha_y[f] = b[0];
                let mut k = 1;
                if spec.use_tic {
                    p.beta_tic[f] = b[k];
                    k += 1;
                }
                if spec.use_tvc {
                    p.beta_tvc[f] = b[k];
                }
                let fitted = &x * &b;
                for r in 0..targets.len() {
                    resid[r][f] = targets[r][f] - fitted[r];
                }
            } else {
                p.alpha_y[f] = targets.iter().map(|t| t[f]).sum::<f64>() / targets.len() as f64;
            }
        }
        let (_, cov) = mean_cov(&resid);
        p.psi_eta_y = make_pd(&cov, 1e-2);
    } else if !targets.is_empty() {
        let (mean, cov) = mean_cov(&targets);
        p.alpha_y = mean;
        p.psi_eta_y = make_pd(&cov, 1e-2);
    }
    p
}

/// Starting parameters from k-means memberships and within-cluster moments.
pub fn kmeans_start(ds: &LongitudinalDataset, spec: &ModelSpec, seed: u64) -> Result<ModelParameters> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::Data { row: 0, msg: "dataset is empty".into() });
    }
    let k_n = spec.n_classes;
    let labels = kmeans(&features(ds, spec), k_n, seed);
    let grid = coefficient_grid(spec.form, ds);
    let min_size = (5 * spec.form.n_factors()).max(10);
    let all: Vec<&Individual> = ds.individuals.iter().collect();
    let mut classes = Vec::with_capacity(k_n);
    let mut sizes = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let members: Vec<&Individual> = ds.individuals.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(i, _)| i).collect();
        sizes.push(members.len().max(1) as f64);
        let use_members = if members.len() >= min_size { &members } else { &all };
        classes.push(class_start(use_members, spec, &grid));
    }
    let mut gating = GatingParameters::zeros(k_n, spec.n_gating_tics);
    for k in 1..k_n {
        gating.intercepts[k - 1] = (sizes[k] / sizes[0]).ln();
    }
    Ok(ModelParameters { classes, gating })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let e = (i as f64) * 0.01;
            pts.push(vec![e, -e]);
            pts.push(vec![10.0 + e, 10.0 - e]);
        }
        let l = kmeans(&pts, 2, 7);
        for i in 0..20 {
            assert_eq!(l[2 * i], l[0]);
            assert_eq!(l[2 * i + 1], l[1]);
        }
        assert_ne!(l[0], l[1]);
        assert_eq!(l, kmeans(&pts, 2, 7));
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![2.0, 5.0, 8.0]);
        let (b, sse) = ols(&x, &y).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] - 3.0).abs() < 1e-12 && sse < 1e-20);
    }

    #[test]
    fn make_pd_floors_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = make_pd(&m, 1e-2);
        assert!(p.clone().cholesky().is_some());
    }
}
