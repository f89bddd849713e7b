//! Mixture full-information maximum likelihood with logistic gating.

mod enumerate;
mod fit;
pub(crate) mod likelihood;
mod optimizer;
mod packing;
mod start;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FormKind, TvcDecomposition};
use crate::moments::ClassParameters;

pub use enumerate::{enumerate_classes, select_by_bic, EnumerationRow, EnumerationTable};
pub use fit::{fit, relabel_by_baseline, standard_errors, FitOptions, FitResult, FitStatus, StartStrategy};
pub use likelihood::{class_loglik, class_loglik_matrix, gating_probabilities, log_gating_probabilities, mixture_loglik};
pub use optimizer::{minimize_bfgs, BfgsOptions, BfgsOutcome, BfgsStop, Objective};
pub use packing::{pack_parameters, parameter_names, reporting_vector, unpack_parameters, ParameterLayout};
pub use start::{kmeans, kmeans_start};

/// Declarative description of a `K`-class model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_classes: usize,
    pub form: FormKind,
    pub decomposition: TvcDecomposition,
    /// Number of first-type TICs entering the gating function (0 = intercept only).
    pub n_gating_tics: usize,
    /// Whether the second-type TIC enters the within-class model.
    pub use_tic: bool,
    /// Whether the decomposed TVC enters the within-class model.
    pub use_tvc: bool,
}

impl ModelSpec {
    /// The full model: two gating TICs, the second-type TIC and the decomposed TVC.
    pub fn full(n_classes: usize, form: FormKind, decomposition: TvcDecomposition) -> Self {
        Self {
            n_classes,
            form,
            decomposition,
            n_gating_tics: crate::data::N_GATING_TICS,
            use_tic: true,
            use_tvc: true,
        }
    }

    /// Outcome-only model with intercept-only gating, used for class enumeration.
    pub fn unconditional(n_classes: usize, form: FormKind) -> Self {
        Self {
            n_classes,
            form,
            decomposition: TvcDecomposition::IntervalSlopes,
            n_gating_tics: 0,
            use_tic: false,
            use_tvc: false,
        }
    }

    pub fn with_classes(&self, n_classes: usize) -> Self {
        Self { n_classes, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Parameter("need at least one class".into()));
        }
        if self.n_gating_tics > crate::data::N_GATING_TICS {
            return Err(Error::Parameter(format!(
                "at most {} gating covariates are available",
                crate::data::N_GATING_TICS
            )));
        }
        Ok(())
    }
}

/// Multinomial-logit gating coefficients for classes `2..K`; class 1 is the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParameters {
    pub intercepts: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl GatingParameters {
    /// All-zero gating (equal mixing at `x_g = 0`).
    pub fn zeros(n_classes: usize, n_tics: usize) -> Self {
        Self {
            intercepts: vec![0.0; n_classes.saturating_sub(1)],
            coefficients: vec![vec![0.0; n_tics]; n_classes.saturating_sub(1)],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.intercepts.len() + 1
    }

    /// Linear predictor of class `k` (0-based); zero for the reference class.
    pub fn score(&self, k: usize, xg: &[f64]) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let b = &self.coefficients[k - 1];
        self.intercepts[k - 1] + b.iter().zip(xg).map(|(b, x)| b * x).sum::<f64>()
    }

    /// Re-references the gating so that the classes appear in `order`
    /// (new class `k` is old class `order[k]`).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n_t = self.coefficients.first().map_or(0, Vec::len);
        let full_int = |k: usize| if k == 0 { 0.0 } else { self.intercepts[k - 1] };
        let full_coef = |k: usize| if k == 0 { vec![0.0; n_t] } else { self.coefficients[k - 1].clone() };
        let base_i = full_int(order[0]);
        let base_c = full_coef(order[0]);
        let mut intercepts = Vec::new();
        let mut coefficients = Vec::new();
        for &old in &order[1..] {
            intercepts.push(full_int(old) - base_i);
            coefficients.push(full_coef(old).iter().zip(&base_c).map(|(a, b)| a - b).collect());
        }
        Self { intercepts, coefficients }
    }
}

/// Full parameter set: per-class expert parameters plus the gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub classes: Vec<ClassParameters>,
    pub gating: GatingParameters,
}

impl ModelParameters {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Reorders classes (new class `k` is old class `order[k]`) with
    /// consistent gating re-referencing.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            classes: order.iter().map(|&k| self.classes[k].clone()).collect(),
            gating: self.gating.permuted(order),
        }
    }

    /// Marginal mean of the outcome baseline growth factor for each class.
    pub fn baseline_means(&self) -> Vec<f64> {
        self.classes
            .iter()
            .map(|c| c.alpha_y[0] + c.beta_tic[0] * c.mu_x + c.beta_tvc[0] * c.mu_eta_x[0])
            .collect()
    }

    pub(crate) fn check_against(&self, spec: &ModelSpec, n_occasions: usize) -> Result<()> {
        if self.classes.len() != spec.n_classes || self.gating.n_classes() != spec.n_classes {
            return Err(Error::Dimension(format!(
                "parameters describe {} classes, spec has {}",
                self.classes.len(),
                spec.n_classes
            )));
        }
        if self.gating.coefficients.iter().any(|c| c.len() != spec.n_gating_tics) {
            return Err(Error::Dimension(format!(
                "gating coefficients must have length {}",
                spec.n_gating_tics
            )));
        }
        for c in &self.classes {
            if c.form.kind() != spec.form {
                return Err(Error::Parameter("class form differs from spec".into()));
            }
            c.validate(n_occasions)?;
        }
        Ok(())
    }
}

/// Identity-ish default class parameters of the right shape.
pub fn default_class(spec: &ModelSpec, n_occasions: usize, coef: f64) -> ClassParameters {
    let c = spec.form.n_factors();
    ClassParameters {
        mu_x: 0.0,
        phi_x: 1.0,
        mu_eta_x: [0.0, 0.0],
        phi_eta_x: [[1.0, 0.0], [0.0, 1.0]],
        rates: crate::model::RelativeRates::linear(n_occasions - 1),
        alpha_y: vec![0.0; c],
        psi_eta_y: DMatrix::identity(c, c),
        beta_tic: vec![0.0; c],
        beta_tvc: vec![0.0; c],
        kappa: 0.0,
        rho_bl: 0.0,
        theta_x: 1.0,
        theta_y: 1.0,
        theta_xy: 0.0,
        form: crate::model::FunctionalForm::from_kind(spec.form, coef),
    }
}
