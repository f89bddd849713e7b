//! Data generation through the structural equations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::SimulationCondition;
use crate::data::{Individual, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::estimation::gating_probabilities;
use crate::model::{fill_state_multipliers, fill_tvc_cumulative, TvcDecomposition};
use crate::moments::ClassParameters;

/// Pre-factored draws for one class.
struct ClassSampler<'a> {
    p: &'a ClassParameters,
    /// Cholesky factor of cov(x_e, eta0_x, eta1_x).
    l_cov: DMatrix<f64>,
    l_psi: DMatrix<f64>,
    /// Cholesky factor of the 2x2 residual covariance (x, y).
    l_res: [[f64; 2]; 2],
}

fn cholesky_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    // Tolerates exact zeros on the diagonal (degenerate latents).
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            if i == j {
                if s < -1e-12 * m[(i, i)].abs().max(1.0) {
                    return Err(Error::Infeasible("covariance is not positive semidefinite".into()));
                }
                l[(i, i)] = s.max(0.0).sqrt();
            } else {
                l[(i, j)] = if l[(j, j)] > 0.0 { s / l[(j, j)] } else { 0.0 };
            }
        }
    }
    Ok(l)
}

impl<'a> ClassSampler<'a> {
    fn new(p: &'a ClassParameters) -> Result<Self> {
        let cxe = p.cov_tic_baseline();
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[
                p.phi_x, cxe, 0.0,
                cxe, p.phi_eta_x[0][0], p.phi_eta_x[0][1],
                0.0, p.phi_eta_x[1][0], p.phi_eta_x[1][1],
            ],
        );
        let l_cov = cholesky_psd(cov)?;
        let l_psi = cholesky_psd(p.psi_eta_y.clone())?;
        let a = p.theta_x.max(0.0).sqrt();
        let b = if a > 0.0 { p.theta_xy / a } else { 0.0 };
        let c2 = p.theta_y - b * b;
        if c2 < -1e-12 {
            return Err(Error::Infeasible("residual covariance is not positive semidefinite".into()));
        }
        Ok(Self { p, l_cov, l_psi, l_res: [[a, 0.0], [b, c2.max(0.0).sqrt()]] })
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    /// Draws `(x_e, x series, y series)` at the given times.
    fn draw(&self, times: &[f64], decomposition: TvcDecomposition, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>, Vec<f64>) {
        let p = self.p;
        let c = p.n_factors();
        let z = &self.l_cov * Self::normals(rng, 3);
        let xe = p.mu_x + z[0];
        let eta0x = p.mu_eta_x[0] + z[1];
        let eta1x = p.mu_eta_x[1] + z[2];
        let zeta = &self.l_psi * Self::normals(rng, c);
        let eta_y: Vec<f64> = (0..c)
            .map(|k| p.alpha_y[k] + p.beta_tic[k] * xe + p.beta_tvc[k] * eta0x + zeta[k])
            .collect();
        let j_n = times.len();
        let mut cum = vec![0.0; j_n];
        let mut mult = vec![0.0; j_n];
        fill_tvc_cumulative(times, p.rates.as_slice(), &mut cum);
        fill_state_multipliers(times, p.rates.as_slice(), decomposition, &mut mult);
        let mut x = Vec::with_capacity(j_n);
        let mut y = Vec::with_capacity(j_n);
        for j in 0..j_n {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let ex = self.l_res[0][0] * e1;
            let ey = self.l_res[1][0] * e1 + self.l_res[1][1] * e2;
            x.push(eta0x + cum[j] * eta1x + ex);
            y.push(p.form.evaluate(&eta_y, times[j]) + p.kappa * mult[j] * eta1x + ey);
        }
        (xe, x, y)
    }
}

/// Draws one individual from a single class at fixed `times` (used by the
/// moment checks).
pub fn simulate_individual(
    params: &ClassParameters,
    times: &[f64],
    decomposition: TvcDecomposition,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    params.validate(times.len())?;
    Ok(ClassSampler::new(params)?.draw(times, decomposition, rng))
}

/// Generates a dataset with true labels. Bit-reproducible for a given seed.
///
/// Membership is the class with the highest gating probability given the
/// first-type covariates.
pub fn generate_dataset(cond: &SimulationCondition, seed: u64) -> Result<LongitudinalDataset> {
    cond.validate()?;
    let truth = cond.true_parameters()?;
    let samplers: Vec<ClassSampler> = truth.classes.iter().map(ClassSampler::new).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cond.xg_correlation;
    let xg: Vec<[f64; 2]> = (0..cond.n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [a, r * a + (1.0 - r * r).sqrt() * b]
        })
        .collect();
    let mut out = Vec::with_capacity(cond.n);
    for (i, g) in xg.iter().enumerate() {
        let probs = gating_probabilities(g, &truth.gating)?;
        let k = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
            .0;
        let times: Vec<f64> = cond
            .times
            .iter()
            .map(|&t| if cond.delta > 0.0 { rng.gen_range(t - cond.delta..t + cond.delta) } else { t })
            .collect();
        let (xe, x, y) = samplers[k].draw(&times, cond.decomposition, &mut rng);
        out.push(Individual {
            id: format!("{}", i + 1),
            times,
            y: y.into_iter().map(Some).collect(),
            x: x.into_iter().map(Some).collect(),
            xe,
            xg: *g,
            label: Some(k),
        });
    }
    LongitudinalDataset::new(out)
}
