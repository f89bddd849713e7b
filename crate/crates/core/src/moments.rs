//! Individual-specific, class-specific model-implied moments.
//!
//! Every observed entry is a linear function of the latent vector
//! `(x_e, eta0_x, eta1_x, u_1..u_C)` plus a residual, where `u = alpha + zeta`
//! collects the outcome growth factors net of their covariate paths:
//!
//! ```text
//! x_j   = eta0_x + cum_j * eta1_x                                   + e_x_j
//! y_j   = lambda_j . (u + beta_tic x_e + beta_tvc eta0_x) + kappa s_j eta1_x + e_y_j
//! x_e   = x_e
//! ```
//!
//! The mean and covariance are propagated exactly through this map, so the
//! cross-covariances induced by `eta1_x` (shared by the TVC series and the
//! state term) and by the trait path are all present.
//!
//! The observed vector is laid out as `(x_1..x_J, y_1..y_J, x_e)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    bilinear_transform, FunctionalForm,
    Occasions, RelativeRates, TvcDecomposition,
};

/// Largest latent dimension (three TVC/TIC latents plus up to three growth factors).
pub(crate) const MAX_LATENT: usize = 6;

/// Per-class parameters of the within-class ("expert") model.
///
/// Outcome growth-factor quantities (`alpha_y`, `psi_eta_y`, `beta_tic`,
/// `beta_tvc`) are on the reporting scale; for the bilinear spline that is the
/// original `(eta0, eta1, eta2)` basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParameters {
    pub mu_x: f64,
    pub phi_x: f64,
    pub mu_eta_x: [f64; 2],
    pub phi_eta_x: [[f64; 2]; 2],
    pub rates: RelativeRates,
    pub alpha_y: Vec<f64>,
    pub psi_eta_y: DMatrix<f64>,
    pub beta_tic: Vec<f64>,
    pub beta_tvc: Vec<f64>,
    pub kappa: f64,
    pub rho_bl: f64,
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_xy: f64,
    pub form: FunctionalForm,
}

impl ClassParameters {
    pub fn n_factors(&self) -> usize {
        self.form.n_factors()
    }

    /// Covariance between the second-type TIC and the TVC baseline factor.
    pub fn cov_tic_baseline(&self) -> f64 {
        self.rho_bl * (self.phi_x * self.phi_eta_x[0][0]).sqrt()
    }

    /// Checks structural invariants. Covariance blocks need only be positive
    /// semidefinite here; the likelihood rejects singular observed covariances.
    pub fn validate(&self, n_occasions: usize) -> Result<()> {
        let c = self.n_factors();
        self.form.validate()?;
        if self.rates.len() + 1 != n_occasions {
            return Err(Error::Dimension(format!(
                "{} occasions need {} relative rates, got {}",
                n_occasions,
                n_occasions - 1,
                self.rates.len()
            )));
        }
        if self.alpha_y.len() != c || self.beta_tic.len() != c || self.beta_tvc.len() != c {
            return Err(Error::Dimension(format!(
                "outcome growth-factor vectors must have length {c}"
            )));
        }
        if self.psi_eta_y.nrows() != c || self.psi_eta_y.ncols() != c {
            return Err(Error::Dimension(format!("psi_eta_y must be {c}x{c}")));
        }
        let scalars = [
            self.mu_x,
            self.phi_x,
            self.mu_eta_x[0],
            self.mu_eta_x[1],
            self.kappa,
            self.rho_bl,
            self.theta_x,
            self.theta_y,
            self.theta_xy,
        ];
        let vectors = self.alpha_y.iter().chain(&self.beta_tic).chain(&self.beta_tvc);
        if scalars.iter().chain(vectors).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite class parameter".into()));
        }
        if self.phi_x < 0.0 || self.theta_x < 0.0 || self.theta_y < 0.0 {
            return Err(Error::Parameter("variances must be non-negative".into()));
        }
        if self.rho_bl.abs() > 1.0 {
            return Err(Error::Parameter(format!("rho_bl {} outside [-1, 1]", self.rho_bl)));
        }
        if self.theta_xy.abs() > (self.theta_x * self.theta_y).sqrt() {
            return Err(Error::Parameter("|theta_xy| exceeds sqrt(theta_x theta_y)".into()));
        }
        let phi = DMatrix::from_fn(2, 2, |r, c| self.phi_eta_x[r][c]);
        check_psd(&phi, "phi_eta_x")?;
        check_psd(&self.psi_eta_y, "psi_eta_y")?;
        Ok(())
    }
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!("{name} has non-finite entries")));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if (m - m.transpose()).iter().any(|v| v.abs() > 1e-10 * scale) {
        return Err(Error::Parameter(format!("{name} is not symmetric")));
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-10 * scale {
        return Err(Error::Parameter(format!(
            "{name} is not positive semidefinite (min eigenvalue {min_eig})"
        )));
    }
    Ok(())
}

/// Model-implied mean and covariance of `(x_1..x_J, y_1..y_J, x_e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpliedMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Linear map from the latent vector to the observed vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDesign {
    /// `(2J+1) x L` loading of observed entries on latents.
    pub a: DMatrix<f64>,
    /// Latent mean (length `L`).
    pub m: DVector<f64>,
    /// Latent covariance (`L x L`).
    pub v: DMatrix<f64>,
    /// Residual covariance of the observed vector.
    pub r: DMatrix<f64>,
}

/// Class parameters pre-transformed to the loading basis, shared by every
/// individual evaluated under the same class.
#[derive(Debug, Clone)]
pub(crate) struct PreparedClass {
    pub form: FunctionalForm,
    pub decomposition: TvcDecomposition,
    pub n_factors: usize,
    pub rates: Vec<f64>,
    pub kappa: f64,
    pub beta_tic: [f64; 3],
    pub beta_tvc: [f64; 3],
    pub mean: [f64; MAX_LATENT],
    pub cov: [[f64; MAX_LATENT]; MAX_LATENT],
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_xy: f64,
}

impl PreparedClass {
    pub fn new(p: &ClassParameters, decomposition: TvcDecomposition) -> Self {
        let c = p.n_factors();
        let mut alpha = [0.0; 3];
        let mut beta_tic = [0.0; 3];
        let mut beta_tvc = [0.0; 3];
        let mut psi = [[0.0; 3]; 3];
        alpha[..c].copy_from_slice(&p.alpha_y);
        beta_tic[..c].copy_from_slice(&p.beta_tic);
        beta_tvc[..c].copy_from_slice(&p.beta_tvc);
        for r in 0..c {
            for s in 0..c {
                psi[r][s] = p.psi_eta_y[(r, s)];
            }
        }
        if let FunctionalForm::BilinearSpline { knot } = p.form {
            let t = bilinear_transform(knot);
            alpha = mat3_vec(&t, &alpha);
            beta_tic = mat3_vec(&t, &beta_tic);
            beta_tvc = mat3_vec(&t, &beta_tvc);
            psi = mat3_sandwich(&t, &psi);
        }

        let mut mean = [0.0; MAX_LATENT];
        mean[0] = p.mu_x;
        mean[1] = p.mu_eta_x[0];
        mean[2] = p.mu_eta_x[1];
        mean[3..3 + c].copy_from_slice(&alpha[..c]);

        let mut cov = [[0.0; MAX_LATENT]; MAX_LATENT];
        cov[0][0] = p.phi_x;
        let cxe = p.cov_tic_baseline();
        cov[0][1] = cxe;
        cov[1][0] = cxe;
        for r in 0..2 {
            for s in 0..2 {
                cov[1 + r][1 + s] = p.phi_eta_x[r][s];
            }
        }
        for r in 0..c {
            for s in 0..c {
                cov[3 + r][3 + s] = psi[r][s];
            }
        }

        Self {
            form: p.form,
            decomposition,
            n_factors: c,
            rates: p.rates.as_slice().to_vec(),
            kappa: p.kappa,
            beta_tic,
            beta_tvc,
            mean,
            cov,
            theta_x: p.theta_x,
            theta_y: p.theta_y,
            theta_xy: p.theta_xy,
        }
    }

    pub fn n_latent(&self) -> usize {
        3 + self.n_factors
    }

    /// Writes the `(2J+1) x L` design (row-major, stride `L`) for `times`.
    pub fn fill_design(&self, times: &[f64], a: &mut [f64]) {
        let j_n = times.len();
        let l = self.n_latent();
        let c = self.n_factors;
        a[..(2 * j_n + 1) * l].iter_mut().for_each(|v| *v = 0.0);
        let mut cum = 0.0;
        let mut lam = [0.0; 3];
        for j in 0..j_n {
            let (mult, step) = if j == 0 {
                (0.0, 0.0)
            } else {
                let dt = times[j] - times[j - 1];
                let r = self.rates[j - 1];
                let m = match self.decomposition {
                    TvcDecomposition::IntervalSlopes => r,
                    TvcDecomposition::IntervalChanges => r * dt,
                };
                (m, r * dt)
            };
            cum += step;
            let xr = &mut a[j * l..(j + 1) * l];
            xr[1] = 1.0;
            xr[2] = cum;

            self.form.loading_row(times[j], &mut lam);
            let yr = &mut a[(j_n + j) * l..(j_n + j + 1) * l];
            let mut bt = 0.0;
            let mut bv = 0.0;
            for k in 0..c {
                bt += lam[k] * self.beta_tic[k];
                bv += lam[k] * self.beta_tvc[k];
                yr[3 + k] = lam[k];
            }
            yr[0] = bt;
            yr[1] = bv;
            yr[2] = self.kappa * mult;
        }
        a[2 * j_n * l] = 1.0;
    }

    /// Residual covariance between observed positions `p` and `q` of a
    /// `J`-occasion layout.
    #[inline]
    pub fn residual(&self, j_n: usize, p: usize, q: usize) -> f64 {
        if p == 2 * j_n || q == 2 * j_n {
            return 0.0;
        }
        let (pw, pv) = (p % j_n, p / j_n);
        let (qw, qv) = (q % j_n, q / j_n);
        if pw != qw {
            return 0.0;
        }
        match (pv, qv) {
            (0, 0) => self.theta_x,
            (1, 1) => self.theta_y,
            _ => self.theta_xy,
        }
    }
}

fn mat3_vec(t: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for r in 0..3 {
        out[r] = (0..3).map(|k| t[r][k] * v[k]).sum();
    }
    out
}

fn mat3_sandwich(t: &[[f64; 3]; 3], m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut tm = [[0.0; 3]; 3];
    for r in 0..3 {
        for s in 0..3 {
            tm[r][s] = (0..3).map(|k| t[r][k] * m[k][s]).sum();
        }
    }
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for s in 0..3 {
            out[r][s] = (0..3).map(|k| tm[r][k] * t[s][k]).sum();
        }
    }
    out
}

fn check_inputs(params: &ClassParameters, occasions: &Occasions) -> Result<()> {
    params.validate(occasions.len())?;
    params.form.validate_for(occasions.as_slice())
}

/// Assembles the linear map `observed = A * latent + residual`.
pub fn latent_design(
    params: &ClassParameters,
    occasions: &Occasions,
    decomposition: TvcDecomposition,
) -> Result<LatentDesign> {
    check_inputs(params, occasions)?;
    let prep = PreparedClass::new(params, decomposition);
    let times = occasions.as_slice();
    let j_n = times.len();
    let n_obs = 2 * j_n + 1;
    let l = prep.n_latent();
    let mut buf = vec![0.0; n_obs * l];
    prep.fill_design(times, &mut buf);
    let a = DMatrix::from_row_slice(n_obs, l, &buf);
    let m = DVector::from_fn(l, |i, _| prep.mean[i]);
    let v = DMatrix::from_fn(l, l, |i, k| prep.cov[i][k]);
    let r = DMatrix::from_fn(n_obs, n_obs, |p, q| prep.residual(j_n, p, q));
    Ok(LatentDesign { a, m, v, r })
}

/// Exact model-implied mean vector and covariance matrix for one individual
/// under one class.
pub fn implied_moments(
    params: &ClassParameters,
    occasions: &Occasions,
    decomposition: TvcDecomposition,
) -> Result<ImpliedMoments> {
    let d = latent_design(params, occasions, decomposition)?;
    let mean = &d.a * &d.m;
    let mut cov = &d.a * &d.v * d.a.transpose() + &d.r;
    // Symmetrise away round-off from the triple product.
    let n = cov.nrows();
    for p in 0..n {
        for q in 0..p {
            let s = 0.5 * (cov[(p, q)] + cov[(q, p)]);
            cov[(p, q)] = s;
            cov[(q, p)] = s;
        }
    }
    Ok(ImpliedMoments { mean, cov })
}

/// Conditional mean and covariance of the outcome growth factors given the
/// second-type TIC and the TVC baseline, on the reporting scale.
pub fn conditional_growth_moments(params: &ClassParameters) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let c = params.n_factors();
    if params.alpha_y.len() != c || params.beta_tic.len() != c || params.beta_tvc.len() != c {
        return Err(Error::Dimension(format!("growth-factor vectors must have length {c}")));
    }
    if params.phi_x < 0.0 || params.phi_eta_x[0][0] < 0.0 || params.rho_bl.abs() > 1.0 {
        return Err(Error::Parameter("invalid TIC/baseline covariance".into()));
    }
    let b = DMatrix::from_fn(c, 2, |r, k| if k == 0 { params.beta_tic[r] } else { params.beta_tvc[r] });
    let cxe = params.cov_tic_baseline();
    let inner = DMatrix::from_row_slice(2, 2, &[params.phi_x, cxe, cxe, params.phi_eta_x[0][0]]);
    let mu = DVector::from_fn(c, |r, _| {
        params.alpha_y[r] + params.beta_tic[r] * params.mu_x + params.beta_tvc[r] * params.mu_eta_x[0]
    });
    let var = &params.psi_eta_y + &b * inner * b.transpose();
    Ok((mu, var))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{fill_state_multipliers, FunctionalForm};
    use approx::assert_abs_diff_eq;

    /// Table-style class-1 parameterisation with bilinear outcome, J occasions.
    pub(crate) fn demo_class(j_n: usize) -> ClassParameters {
        let psi = DMatrix::from_row_slice(3, 3, &[25.0, 1.5, 1.5, 1.5, 1.0, 0.3, 1.5, 0.3, 1.0]);
        let sd = [5.0, 1.0, 1.0];
        ClassParameters {
            mu_x: 0.0,
            phi_x: 1.0,
            mu_eta_x: [0.0, 5.0],
            phi_eta_x: [[1.0, 0.3], [0.3, 1.0]],
            rates: RelativeRates::new((0..j_n - 1).map(|j| 1.0 - 0.1 * j as f64).collect()).unwrap(),
            alpha_y: vec![48.0, 4.5, 1.65],
            psi_eta_y: psi,
            beta_tic: sd.iter().map(|s| s * 0.06f64.sqrt()).collect(),
            beta_tvc: sd.iter().map(|s| s * 0.14f64.sqrt()).collect(),
            kappa: 0.3,
            rho_bl: 0.3,
            theta_x: 1.0,
            theta_y: 1.0,
            theta_xy: 0.3,
            form: FunctionalForm::BilinearSpline { knot: (j_n as f64 - 1.0) / 2.0 },
        }
    }

    fn linear_two_wave() -> ClassParameters {
        ClassParameters {
            mu_x: 0.5,
            phi_x: 2.0,
            mu_eta_x: [1.0, 2.0],
            phi_eta_x: [[1.0, 0.2], [0.2, 0.5]],
            rates: RelativeRates::new(vec![1.0]).unwrap(),
            alpha_y: vec![3.0, 1.0],
            psi_eta_y: DMatrix::from_row_slice(2, 2, &[4.0, 0.5, 0.5, 1.0]),
            beta_tic: vec![0.5, 0.1],
            beta_tvc: vec![0.3, -0.2],
            kappa: 0.7,
            rho_bl: 0.4,
            theta_x: 0.3,
            theta_y: 0.6,
            theta_xy: 0.1,
            form: FunctionalForm::Linear,
        }
    }

    #[test]
    fn degenerate_latents_give_residual_covariance() {
        let mut p = demo_class(4);
        p.phi_x = 0.0;
        p.phi_eta_x = [[0.0; 2]; 2];
        p.psi_eta_y = DMatrix::zeros(3, 3);
        p.rho_bl = 0.0;
        let o = Occasions::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let m = implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();
        let d = latent_design(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();
        assert_eq!(m.cov, d.r);
        assert_eq!(d.r[(0, 4)], 0.3);
        assert_eq!(d.r[(8, 8)], 0.0);

        p.theta_x = 0.0;
        p.theta_y = 0.0;
        p.theta_xy = 0.0;
        let m = implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();
        assert!(m.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn severed_paths_block_diagonal() {
        let mut p = demo_class(5);
        p.kappa = 0.0;
        p.beta_tic = vec![0.0; 3];
        p.beta_tvc = vec![0.0; 3];
        let o = Occasions::new(vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = latent_design(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();
        let s = &d.a * &d.v * d.a.transpose();
        for xi in 0..5 {
            for yi in 5..10 {
                assert_eq!(s[(xi, yi)], 0.0);
            }
        }
    }

    /// Hand-built 5x5 moments for a linear two-wave model.
    #[test]
    fn two_wave_linear_by_hand() {
        let p = linear_two_wave();
        let (t1, t2) = (0.0, 1.5);
        let o = Occasions::new(vec![t1, t2]).unwrap();
        let m = implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();

        let cxe = 0.4 * (2.0f64 * 1.0).sqrt();
        // latent covariance of (xe, e0, e1)
        let var_xe = 2.0;
        let (v00, v01, v11) = (1.0, 0.2, 0.5);
        // x1 = e0, x2 = e0 + 1.5 e1
        let c_x1x1 = v00 + 0.3;
        let c_x2x2 = v00 + 2.0 * 1.5 * v01 + 2.25 * v11 + 0.3;
        let c_x1x2 = v00 + 1.5 * v01;
        // outcome factors g = u + b_tic xe + b_tvc e0, u ~ (alpha, Psi)
        // var(g0) etc.
        let (bt0, bt1, bv0, bv1) = (0.5, 0.1, 0.3, -0.2);
        let cov_g = |a0: f64, a1: f64, b0: f64, b1: f64, psi: f64| {
            psi + a0 * b0 * var_xe + (a0 * b1 + a1 * b0) * cxe + a1 * b1 * v00
        };
        let g00 = cov_g(bt0, bv0, bt0, bv0, 4.0);
        let g01 = cov_g(bt0, bv0, bt1, bv1, 0.5);
        let g11 = cov_g(bt1, bv1, bt1, bv1, 1.0);
        // y1 = g0 + 0, y2 = g0 + 1.5 g1 + kappa*e1
        let k = 0.7;
        let cov_g_e1 = |a0: f64, a1: f64| a0 * 0.0 + a1 * v01; // cov(xe,e1)=0
        let cov_g_e0 = |a0: f64, a1: f64| a0 * cxe + a1 * v00;
        let cov_g_xe = |a0: f64, a1: f64| a0 * var_xe + a1 * cxe;
        let c_y1y1 = g00 + 0.6;
        let c_y1y2 = g00 + 1.5 * g01 + k * cov_g_e1(bt0, bv0);
        let c_y2y2 = g00
            + 2.25 * g11
            + 3.0 * g01
            + k * k * v11
            + 2.0 * k * (cov_g_e1(bt0, bv0) + 1.5 * cov_g_e1(bt1, bv1))
            + 0.6;
        // cross x/y
        let g0_x1 = cov_g_e0(bt0, bv0);
        let g1_x1 = cov_g_e0(bt1, bv1);
        let g0_x2 = g0_x1 + 1.5 * cov_g_e1(bt0, bv0);
        let g1_x2 = g1_x1 + 1.5 * cov_g_e1(bt1, bv1);
        let c_x1y1 = g0_x1 + 0.1;
        let c_x1y2 = g0_x1 + 1.5 * g1_x1 + k * v01;
        let c_x2y1 = g0_x2;
        let c_x2y2 = g0_x2 + 1.5 * g1_x2 + k * (v01 + 1.5 * v11) + 0.1;
        let c_xe_x1 = cxe;
        let c_xe_x2 = cxe;
        let c_xe_y1 = cov_g_xe(bt0, bv0);
        let c_xe_y2 = cov_g_xe(bt0, bv0) + 1.5 * cov_g_xe(bt1, bv1);

        #[rustfmt::skip]
        let expect = DMatrix::from_row_slice(5, 5, &[
            c_x1x1, c_x1x2, c_x1y1, c_x1y2, c_xe_x1,
            c_x1x2, c_x2x2, c_x2y1, c_x2y2, c_xe_x2,
            c_x1y1, c_x2y1, c_y1y1, c_y1y2, c_xe_y1,
            c_x1y2, c_x2y2, c_y1y2, c_y2y2, c_xe_y2,
            c_xe_x1, c_xe_x2, c_xe_y1, c_xe_y2, var_xe,
        ]);
        for p_ in 0..5 {
            for q in 0..5 {
                assert_abs_diff_eq!(m.cov[(p_, q)], expect[(p_, q)], epsilon = 1e-12);
            }
        }
        let mg0 = 3.0 + 0.5 * 0.5 + 0.3 * 1.0;
        let mg1 = 1.0 + 0.1 * 0.5 - 0.2 * 1.0;
        let expect_mean = [1.0, 1.0 + 1.5 * 2.0, mg0, mg0 + 1.5 * mg1 + 0.7 * 2.0, 0.5];
        for (p_, e) in expect_mean.iter().enumerate() {
            assert_abs_diff_eq!(m.mean[p_], *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn x_mean_at_last_wave_is_cumulative() {
        let p = demo_class(10);
        let o = Occasions::new((0..10).map(|j| j as f64).collect()).unwrap();
        let m = implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();
        let sum: f64 = p.rates.as_slice().iter().sum();
        assert_abs_diff_eq!(m.mean[9], 5.0 * sum, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mean[9], 27.0, epsilon = 1e-12);
    }

    #[test]
    fn y_mean_matches_growth_curve_plus_state_term() {
        let p = demo_class(10);
        let times: Vec<f64> = (0..10).map(|j| j as f64 + 0.1 * ((j * 7) % 3) as f64).collect();
        let o = Occasions::new(times.clone()).unwrap();
        for dec in [TvcDecomposition::IntervalSlopes, TvcDecomposition::IntervalChanges] {
            let m = implied_moments(&p, &o, dec).unwrap();
            let (mu_eta, _) = conditional_growth_moments(&p).unwrap();
            let mut mult = vec![0.0; 10];
            fill_state_multipliers(&times, p.rates.as_slice(), dec, &mut mult);
            for j in 0..10 {
                let expect = p.form.evaluate(mu_eta.as_slice(), times[j]) + p.kappa * p.mu_eta_x[1] * mult[j];
                assert_abs_diff_eq!(m.mean[10 + j], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn covariance_symmetric_and_psd() {
        let p = demo_class(10);
        let o = Occasions::new((0..10).map(|j| j as f64 * 1.1).collect()).unwrap();
        let m = implied_moments(&p, &o, TvcDecomposition::IntervalChanges).unwrap();
        assert_eq!(m.cov, m.cov.transpose());
        assert!(m.cov.clone().cholesky().is_some());
    }

    #[test]
    fn zero_kappa_decouples_y_block_from_rates() {
        let mut p = demo_class(6);
        p.kappa = 0.0;
        let o = Occasions::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let a = implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();
        p.rates = RelativeRates::new(vec![1.0, 0.1, 2.0, -0.4, 0.7]).unwrap();
        let b = implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).unwrap();
        for r in 6..13 {
            assert_abs_diff_eq!(a.mean[r], b.mean[r], epsilon = 1e-12);
            for s in 6..13 {
                assert_abs_diff_eq!(a.cov[(r, s)], b.cov[(r, s)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conditional_growth_examples() {
        let mut p = demo_class(10);
        p.beta_tic = vec![0.0; 3];
        p.beta_tvc = vec![0.0; 3];
        let (mu, var) = conditional_growth_moments(&p).unwrap();
        assert_eq!(mu.as_slice(), p.alpha_y.as_slice());
        assert_eq!(var, p.psi_eta_y);

        p.rho_bl = 0.0;
        p.phi_x = 1.0;
        p.phi_eta_x[0][0] = 1.0;
        p.beta_tic = vec![1.0, 0.0, 0.0];
        p.beta_tvc = vec![1.0, 0.0, 0.0];
        let (_, var) = conditional_growth_moments(&p).unwrap();
        assert_abs_diff_eq!(var[(0, 0)] - p.psi_eta_y[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var[(1, 1)], p.psi_eta_y[(1, 1)], epsilon = 1e-12);
    }

    #[test]
    fn explained_variance_ratios() {
        // Trait 14% / TIC 6% with rho 0.3 explains ~26% relative to psi; 7% / 3% ~13%.
        let p1 = demo_class(10);
        let (_, v1) = conditional_growth_moments(&p1).unwrap();
        let mut p2 = demo_class(10);
        let sd = [5.0, 1.0, 1.0];
        p2.beta_tic = sd.iter().map(|s| s * 0.03f64.sqrt()).collect();
        p2.beta_tvc = sd.iter().map(|s| s * 0.07f64.sqrt()).collect();
        let (_, v2) = conditional_growth_moments(&p2).unwrap();
        for c in 0..3 {
            let psi = p1.psi_eta_y[(c, c)];
            // quadratic-form oracle: b' S b with S = [[1, .3], [.3, 1]]
            let q = |a: f64, b: f64| (a * a + b * b + 2.0 * 0.3 * a * b) * psi;
            let r1 = (v1[(c, c)] - psi) / psi;
            let r2 = (v2[(c, c)] - psi) / psi;
            assert_abs_diff_eq!(r1 * psi, q(0.06f64.sqrt(), 0.14f64.sqrt()), epsilon = 1e-10);
            assert_abs_diff_eq!(r1, 0.26, epsilon = 0.006);
            assert_abs_diff_eq!(r2, 0.13, epsilon = 0.003);
        }
        let diff = &v1 - &p1.psi_eta_y;
        assert!(diff.symmetric_eigen().eigenvalues.min() > -1e-10);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let o = Occasions::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut p = demo_class(4);
        p.rho_bl = 1.2;
        assert!(implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).is_err());
        let mut p = demo_class(4);
        p.theta_xy = 2.0;
        assert!(implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).is_err());
        let mut p = demo_class(4);
        p.psi_eta_y[(0, 0)] = -1.0;
        assert!(implied_moments(&p, &o, TvcDecomposition::IntervalSlopes).is_err());
        let p = demo_class(5);
        assert!(matches!(
            implied_moments(&p, &o, TvcDecomposition::IntervalSlopes),
            Err(Error::Dimension(_))
        ));
    }
}
