//! Class enumeration by information criteria on outcome-only models.

use serde::{Deserialize, Serialize};

use super::fit::{fit, FitOptions, FitResult};
use super::ModelSpec;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationRow {
    pub n_classes: usize,
    pub converged: bool,
    pub n_free_parameters: usize,
    pub neg2_loglik: f64,
    pub aic: f64,
    pub bic: f64,
    /// Residual variance of the outcome in each class.
    pub residual_variances: Vec<f64>,
    /// Marginal mixing proportions.
    pub mixing_proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationTable {
    pub rows: Vec<EnumerationRow>,
    /// Number of classes with the smallest BIC among converged fits.
    pub selected: Option<usize>,
}

/// Returns the 1-based class count with the smallest BIC, skipping `None`
/// (failed) entries. Entry `i` corresponds to `i + 1` classes.
pub fn select_by_bic(bic: &[Option<f64>]) -> Option<usize> {
    bic.iter()
        .enumerate()
        .filter_map(|(i, b)| b.filter(|v| v.is_finite()).map(|v| (i + 1, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

fn row_of(r: &FitResult) -> EnumerationRow {
    EnumerationRow {
        n_classes: r.spec.n_classes,
        converged: r.is_converged(),
        n_free_parameters: r.n_free_parameters,
        neg2_loglik: r.neg2_loglik(),
        aic: r.aic,
        bic: r.bic,
        residual_variances: r.estimates.classes.iter().map(|c| c.theta_y).collect(),
        mixing_proportions: r.class_shares(),
    }
}

/// Fits outcome-only models with `1..=k_max` classes and selects by BIC.
///
/// Covariates are dropped from `template` regardless of its flags, following
/// the usual practice of enumerating classes before adding predictors.
pub fn enumerate_classes(
    ds: &LongitudinalDataset,
    template: &ModelSpec,
    k_max: usize,
    options: &FitOptions,
) -> Result<(EnumerationTable, Vec<FitResult>)> {
    if k_max == 0 {
        return Err(Error::Parameter("k_max must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(k_max);
    let mut fits = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let spec = ModelSpec::unconditional(k, template.form);
        let r = fit(ds, &spec, options)?;
        rows.push(row_of(&r));
        fits.push(r);
    }
    let bic: Vec<Option<f64>> = rows.iter().map(|r| r.converged.then_some(r.bic)).collect();
    Ok((EnumerationTable { selected: select_by_bic(&bic), rows }, fits))
}
