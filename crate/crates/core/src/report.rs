//! Plot-ready output derived from fitted models.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::moments::conditional_growth_moments;

/// One point of a class-specific mean curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    /// 1-based class label.
    pub class: usize,
    pub t: f64,
    pub value: f64,
}

/// Class-specific curves implied by the estimated growth-factor means.
///
/// State effects of the TVC are left out: the curve is the trajectory of the
/// growth factors alone.
pub fn emit_trajectories(fit: &FitResult, grid: &[f64]) -> Result<Vec<TrajectoryRow>> {
    if !fit.is_converged() {
        return Err(Error::FitFailed("trajectories need a converged fit".into()));
    }
    let mut rows = Vec::with_capacity(grid.len() * fit.estimates.n_classes());
    for (k, c) in fit.estimates.classes.iter().enumerate() {
        let (mu, _) = conditional_growth_moments(c)?;
        let eta: Vec<f64> = mu.iter().copied().collect();
        for &t in grid {
            rows.push(TrajectoryRow { class: k + 1, t, value: c.form.evaluate(&eta, t) });
        }
    }
    Ok(rows)
}

/// Evenly spaced grid with `points` entries from `lo` to `hi`.
pub fn time_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn write_trajectories<W: Write>(rows: &[TrajectoryRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{default_class, FitStatus, GatingParameters, ModelParameters, ModelSpec};
    use crate::model::{FormKind, FunctionalForm};

    fn fake_fit(spec: ModelSpec, classes: Vec<crate::moments::ClassParameters>) -> FitResult {
        let k = classes.len();
        FitResult {
            spec,
            n_occasions: 3,
            n_individuals: 0,
            estimates: ModelParameters { classes, gating: GatingParameters::zeros(k, 0) },
            parameter_names: vec![],
            reported: vec![],
            standard_errors: vec![],
            loglik: 0.0,
            aic: 0.0,
            bic: 0.0,
            n_free_parameters: 0,
            posterior: vec![],
            status: FitStatus::Converged { attempts: 1 },
            iterations: 0,
            gradient_norm: 0.0,
        }
    }

    #[test]
    fn linear_curve() {
        let spec = ModelSpec::unconditional(1, FormKind::Linear);
        let mut c = default_class(&spec, 3, 0.0);
        c.alpha_y = vec![2.0, 3.0];
        let rows = emit_trajectories(&fake_fit(spec, vec![c]), &[0.0, 1.0, 2.5]).unwrap();
        let v: Vec<f64> = rows.iter().map(|r| r.value).collect();
        assert_eq!(v, vec![2.0, 5.0, 9.5]);
    }

    #[test]
    fn bilinear_kink_at_knot() {
        let spec = ModelSpec::unconditional(1, FormKind::BilinearSpline);
        let mut c = default_class(&spec, 3, 4.0);
        c.alpha_y = vec![10.0, 2.0, 0.5];
        c.form = FunctionalForm::BilinearSpline { knot: 4.0 };
        let rows = emit_trajectories(&fake_fit(spec, vec![c]), &[3.0, 4.0, 5.0]).unwrap();
        assert!((rows[1].value - rows[0].value - 2.0).abs() < 1e-12);
        assert!((rows[2].value - rows[1].value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn failed_fit_is_rejected() {
        let spec = ModelSpec::unconditional(1, FormKind::Linear);
        let mut f = fake_fit(spec.clone(), vec![default_class(&spec, 3, 0.0)]);
        f.status = FitStatus::Failed { attempts: 10, reason: "x".into() };
        assert!(emit_trajectories(&f, &[0.0]).is_err());
    }
}
