//! Simulation conditions: generating parameters for every class plus the
//! sampling design, readable from and writable to TOML.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{GatingParameters, ModelParameters};
use crate::model::{validate_times, FunctionalForm, RelativeRates, TvcDecomposition};
use crate::moments::ClassParameters;

/// Generating values for one latent class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTruth {
    /// Marginal means of the outcome growth factors (reporting basis).
    pub growth_means: Vec<f64>,
    /// Unexplained covariance of the outcome growth factors.
    pub psi: Vec<Vec<f64>>,
    pub form: FunctionalForm,
    pub tvc_means: [f64; 2],
    pub tvc_cov: [[f64; 2]; 2],
    /// Relative rates of the TVC, first entry 1.
    pub rates: Vec<f64>,
    pub theta_y: f64,
    pub theta_x: f64,
    /// Correlation of the contemporaneous x/y residuals.
    pub residual_correlation: f64,
    pub kappa: f64,
    pub rho_bl: f64,
    pub tic_mean: f64,
    pub tic_var: f64,
    /// Share of each growth factor's unexplained variance matched by the trait path.
    pub trait_explained: f64,
    /// Share of each growth factor's unexplained variance matched by the TIC path.
    pub tic_explained: f64,
}

impl ClassTruth {
    /// Regression coefficients `sqrt(share * psi_cc / var(covariate))` per factor.
    fn coefficients(&self, share: f64, var: f64) -> Vec<f64> {
        (0..self.growth_means.len()).map(|c| (share * self.psi[c][c] / var).sqrt()).collect()
    }

    pub fn to_class_parameters(&self) -> Result<ClassParameters> {
        let c = self.growth_means.len();
        if c != self.form.n_factors() || self.psi.len() != c || self.psi.iter().any(|r| r.len() != c) {
            return Err(Error::Condition(format!("growth quantities must have {} factors", self.form.n_factors())));
        }
        if !(self.tic_var > 0.0) || !(self.tvc_cov[0][0] > 0.0) {
            return Err(Error::Condition("covariate variances must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.trait_explained) || !(0.0..1.0).contains(&self.tic_explained) {
            return Err(Error::Condition("explained shares must lie in [0, 1)".into()));
        }
        let beta_tic = self.coefficients(self.tic_explained, self.tic_var);
        let beta_tvc = self.coefficients(self.trait_explained, self.tvc_cov[0][0]);
        let alpha_y = (0..c)
            .map(|k| self.growth_means[k] - beta_tic[k] * self.tic_mean - beta_tvc[k] * self.tvc_means[0])
            .collect();
        let rates = RelativeRates::new(self.rates.clone()).map_err(|e| Error::Condition(e.to_string()))?;
        let p = ClassParameters {
            mu_x: self.tic_mean,
            phi_x: self.tic_var,
            mu_eta_x: self.tvc_means,
            phi_eta_x: self.tvc_cov,
            rates,
            alpha_y,
            psi_eta_y: DMatrix::from_fn(c, c, |r, s| self.psi[r][s]),
            beta_tic,
            beta_tvc,
            kappa: self.kappa,
            rho_bl: self.rho_bl,
            theta_x: self.theta_x,
            theta_y: self.theta_y,
            theta_xy: self.residual_correlation * (self.theta_x * self.theta_y).sqrt(),
            form: self.form,
        };
        Ok(p)
    }
}

/// Full description of a simulation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationCondition {
    pub name: String,
    pub n: usize,
    /// Nominal measurement times.
    pub times: Vec<f64>,
    /// Half-width of the uniform window around each nominal time.
    pub delta: f64,
    pub decomposition: TvcDecomposition,
    /// Correlation of the two first-type TICs.
    pub xg_correlation: f64,
    pub gating: GatingParameters,
    pub classes: Vec<ClassTruth>,
    /// Mahalanobis distance between class growth factors (descriptive only).
    #[serde(default)]
    pub mahalanobis_d: Option<f64>,
}

/// Allocation ratio of the two-class designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Balanced,
    Unbalanced,
}

/// One cell of the two-class simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub allocation: Allocation,
    /// Difference between the two class knots: 1.0, 1.5 or 2.0.
    pub knot_gap: f64,
    /// TVC scenario 1, 2 or 3.
    pub scenario: u8,
    pub theta_y: f64,
    pub decomposition: TvcDecomposition,
}

impl GridCell {
    /// The desk-scale reference cell: balanced, knots 5/4, scenario 2, unit residuals.
    pub fn reference(decomposition: TvcDecomposition) -> Self {
        Self { allocation: Allocation::Balanced, knot_gap: 1.0, scenario: 2, theta_y: 1.0, decomposition }
    }

    /// Every cell of the grid for one decomposition (36 cells).
    pub fn all(decomposition: TvcDecomposition) -> Vec<Self> {
        let mut out = Vec::new();
        for allocation in [Allocation::Balanced, Allocation::Unbalanced] {
            for knot_gap in [1.0, 1.5, 2.0] {
                for scenario in [1, 2, 3] {
                    for theta_y in [1.0, 2.0] {
                        out.push(Self { allocation, knot_gap, scenario, theta_y, decomposition });
                    }
                }
            }
        }
        out
    }
}

const PSI: [[f64; 3]; 3] = [[25.0, 1.5, 1.5], [1.5, 1.0, 0.3], [1.5, 0.3, 1.0]];
const TVC_COV: [[f64; 2]; 2] = [[1.0, 0.3], [0.3, 1.0]];

fn psi_rows() -> Vec<Vec<f64>> {
    PSI.iter().map(|r| r.to_vec()).collect()
}

fn linear_rates(first: f64, step: f64, n: usize) -> Vec<f64> {
    // Rounded so that condition files show the intended decimals.
    (0..n).map(|j| ((first - step * j as f64) * 1e12).round() / 1e12).collect()
}

impl SimulationCondition {
    /// A cell of the two-class grid with ten waves and 500 individuals.
    pub fn grid(cell: GridCell) -> Result<Self> {
        let knots = match cell.knot_gap {
            g if (g - 1.0).abs() < 1e-9 => (5.0, 4.0),
            g if (g - 1.5).abs() < 1e-9 => (5.25, 3.75),
            g if (g - 2.0).abs() < 1e-9 => (5.5, 3.5),
            g => return Err(Error::Condition(format!("knot gap {g} is not one of 1.0, 1.5, 2.0"))),
        };
        let (means, rates) = match cell.scenario {
            1 => ([[0.0, 5.0], [0.0, 5.0]], [linear_rates(1.0, 0.1, 9), linear_rates(1.0, 0.1, 9)]),
            2 => ([[0.0, 4.0], [0.0, 6.0]], [linear_rates(1.0, 0.1, 9), linear_rates(1.0, 0.1, 9)]),
            3 => ([[0.0, 5.0], [0.0, 5.0]], [linear_rates(1.0, 0.12, 9), linear_rates(1.0, 0.08, 9)]),
            s => return Err(Error::Condition(format!("scenario {s} is not one of 1, 2, 3"))),
        };
        let intercept = match cell.allocation {
            Allocation::Balanced => 0.0,
            Allocation::Unbalanced => 0.775,
        };
        let class = |k: usize| ClassTruth {
            growth_means: if k == 0 { vec![48.0, 4.5, 1.65] } else { vec![52.0, 5.0, 1.8] },
            psi: psi_rows(),
            form: FunctionalForm::BilinearSpline { knot: if k == 0 { knots.0 } else { knots.1 } },
            tvc_means: means[k],
            tvc_cov: TVC_COV,
            rates: rates[k].clone(),
            theta_y: cell.theta_y,
            theta_x: 1.0,
            residual_correlation: 0.3,
            kappa: if k == 0 { 0.3 } else { 0.6 },
            rho_bl: 0.3,
            tic_mean: 0.0,
            tic_var: 1.0,
            trait_explained: if k == 0 { 0.14 } else { 0.07 },
            tic_explained: if k == 0 { 0.06 } else { 0.03 },
        };
        let alloc = match cell.allocation {
            Allocation::Balanced => "balanced",
            Allocation::Unbalanced => "unbalanced",
        };
        let decomp = match cell.decomposition {
            TvcDecomposition::IntervalSlopes => "slopes",
            TvcDecomposition::IntervalChanges => "changes",
        };
        let c = Self {
            name: format!("{alloc}-gap{}-s{}-thy{}-{decomp}", cell.knot_gap, cell.scenario, cell.theta_y),
            n: 500,
            times: (0..10).map(f64::from).collect(),
            delta: 0.25,
            decomposition: cell.decomposition,
            xg_correlation: 0.3,
            gating: GatingParameters { intercepts: vec![intercept], coefficients: vec![vec![1.5f64.ln(), 1.7f64.ln()]] },
            classes: vec![class(0), class(1)],
            mahalanobis_d: Some(0.86),
        };
        c.validate()?;
        Ok(c)
    }

    /// Three well-separated classes (knots two time units apart) for class enumeration.
    pub fn three_class(n: usize) -> Result<Self> {
        let mut base = Self::grid(GridCell::reference(TvcDecomposition::IntervalSlopes))?;
        let mut third = base.classes[1].clone();
        base.classes[0].form = FunctionalForm::BilinearSpline { knot: 3.0 };
        base.classes[1].form = FunctionalForm::BilinearSpline { knot: 5.0 };
        third.form = FunctionalForm::BilinearSpline { knot: 7.0 };
        third.growth_means = vec![56.0, 5.5, 1.95];
        third.tvc_means = [0.0, 5.0];
        third.kappa = 0.45;
        base.classes.push(third);
        // Modal membership splits the first gating covariate at its terciles (about -0.43 and 0.43).
        let cut = 0.4307;
        base.gating = GatingParameters { intercepts: vec![cut, 0.0], coefficients: vec![vec![1.0, 0.0], vec![2.0, 0.0]] };
        base.name = "three-class-gap2".into();
        base.n = n;
        base.mahalanobis_d = None;
        base.validate()?;
        Ok(base)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Condition(m));
        if self.n == 0 {
            return bad("sample size must be positive".into());
        }
        validate_times(&self.times).map_err(|e| Error::Condition(e.to_string()))?;
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return bad("delta must be a non-negative number".into());
        }
        let min_gap = self.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if 2.0 * self.delta >= min_gap {
            return bad(format!("time windows of half-width {} overlap", self.delta));
        }
        if !(self.xg_correlation.abs() < 1.0) {
            return bad("xg_correlation must lie in (-1, 1)".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let k = self.classes.len();
        let g = &self.gating;
        if g.intercepts.len() != k - 1 || g.coefficients.len() != k - 1 || g.coefficients.iter().any(|c| c.len() != crate::data::N_GATING_TICS) {
            return bad(format!("gating must have {} rows of {} coefficients", k - 1, crate::data::N_GATING_TICS));
        }
        if g.intercepts.iter().chain(g.coefficients.iter().flatten()).any(|v| !v.is_finite()) {
            return bad("gating coefficients must be finite".into());
        }
        let kind = self.classes[0].form.kind();
        let (lo, hi) = (self.times[0] + self.delta, self.times[self.times.len() - 1] - self.delta);
        for (i, c) in self.classes.iter().enumerate() {
            if c.form.kind() != kind {
                return bad("all classes must share one functional form".into());
            }
            if c.rates.len() + 1 != self.times.len() {
                return bad(format!("class {} needs {} relative rates", i + 1, self.times.len() - 1));
            }
            if let FunctionalForm::BilinearSpline { knot } = c.form {
                if !(knot > lo && knot < hi) {
                    return bad(format!("class {} knot {knot} is outside ({lo}, {hi})", i + 1));
                }
            }
            let p = c.to_class_parameters()?;
            p.validate(self.times.len()).map_err(|e| Error::Condition(format!("class {}: {e}", i + 1)))?;
            p.form.validate().map_err(|e| Error::Condition(format!("class {}: {e}", i + 1)))?;
            for m in [p.psi_eta_y.clone(), DMatrix::from_fn(2, 2, |r, s| p.phi_eta_x[r][s])] {
                if m.cholesky().is_none() {
                    return bad(format!("class {} has a covariance that is not positive definite", i + 1));
                }
            }
        }
        Ok(())
    }

    /// Generating parameter set.
    pub fn true_parameters(&self) -> Result<ModelParameters> {
        Ok(ModelParameters {
            classes: self.classes.iter().map(ClassTruth::to_class_parameters).collect::<Result<_>>()?,
            gating: self.gating.clone(),
        })
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Condition(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Condition(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_36_valid_cells() {
        let cells = GridCell::all(TvcDecomposition::IntervalSlopes);
        assert_eq!(cells.len(), 36);
        for c in cells {
            SimulationCondition::grid(c).unwrap();
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = SimulationCondition::grid(GridCell::reference(TvcDecomposition::IntervalChanges)).unwrap();
        let s = c.to_toml().unwrap();
        assert_eq!(SimulationCondition::from_toml(&s).unwrap(), c);
    }

    #[test]
    fn reference_coefficients() {
        let c = SimulationCondition::grid(GridCell::reference(TvcDecomposition::IntervalSlopes)).unwrap();
        let t = c.true_parameters().unwrap();
        let b = &t.classes[0].beta_tvc;
        assert!((b[0] - (0.14f64 * 25.0).sqrt()).abs() < 1e-12);
        assert!((t.classes[1].beta_tic[1] - 0.03f64.sqrt()).abs() < 1e-12);
        // Zero covariate means leave the intercepts at the growth means.
        assert_eq!(t.classes[0].alpha_y, vec![48.0, 4.5, 1.65]);
        assert!((t.classes[0].theta_xy - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_distance_of_growth_means() {
        let c = SimulationCondition::grid(GridCell::reference(TvcDecomposition::IntervalSlopes)).unwrap();
        let psi = DMatrix::from_fn(3, 3, |r, s| PSI[r][s]);
        let d = nalgebra::DVector::from_fn(3, |i, _| c.classes[1].growth_means[i] - c.classes[0].growth_means[i]);
        let m = (d.transpose() * psi.try_inverse().unwrap() * &d)[(0, 0)].sqrt();
        assert!((m - 0.86).abs() < 0.005, "{m}");
    }

    #[test]
    fn rejects_bad_conditions() {
        let mut c = SimulationCondition::grid(GridCell::reference(TvcDecomposition::IntervalSlopes)).unwrap();
        c.classes[0].form = FunctionalForm::BilinearSpline { knot: 9.5 };
        assert!(matches!(c.validate(), Err(Error::Condition(_))));
        let mut c = SimulationCondition::grid(GridCell::reference(TvcDecomposition::IntervalSlopes)).unwrap();
        c.classes[1].rates[0] = 0.9;
        assert!(c.validate().is_err());
        let mut c = SimulationCondition::grid(GridCell::reference(TvcDecomposition::IntervalSlopes)).unwrap();
        c.gating.intercepts.clear();
        assert!(c.validate().is_err());
        assert!(SimulationCondition::grid(GridCell { knot_gap: 3.0, ..GridCell::reference(TvcDecomposition::IntervalSlopes) }).is_err());
        assert!(SimulationCondition::from_toml("n = 5").is_err());
    }
}
