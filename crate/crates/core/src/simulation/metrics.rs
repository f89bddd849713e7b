//! Monte Carlo performance metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn need(est: &[f64], min: usize) -> Result<()> {
    if est.len() < min {
        return Err(Error::Parameter(format!("need at least {min} estimates, got {}", est.len())));
    }
    Ok(())
}

fn nonzero(truth: f64) -> Result<()> {
    if truth == 0.0 {
        return Err(Error::Parameter("relative metric undefined for a zero true value".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `sum(est - truth) / (truth * S)`.
pub fn relative_bias(est: &[f64], truth: f64) -> Result<f64> {
    need(est, 1)?;
    nonzero(truth)?;
    Ok(est.iter().map(|e| e - truth).sum::<f64>() / (truth * est.len() as f64))
}

/// Mean of `est - truth`.
pub fn bias(est: &[f64], truth: f64) -> Result<f64> {
    need(est, 1)?;
    Ok(mean(est) - truth)
}

/// Standard deviation of the estimates with divisor `S - 1`.
pub fn empirical_se(est: &[f64]) -> Result<f64> {
    need(est, 2)?;
    let m = mean(est);
    Ok((est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt())
}

/// `sqrt(sum((est - truth)^2) / S)`.
pub fn rmse(est: &[f64], truth: f64) -> Result<f64> {
    need(est, 1)?;
    Ok((est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / est.len() as f64).sqrt())
}

/// `rmse / truth`.
pub fn relative_rmse(est: &[f64], truth: f64) -> Result<f64> {
    nonzero(truth)?;
    Ok(rmse(est, truth)? / truth)
}

/// Share of intervals containing the truth.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Parameter("no intervals".into()));
    }
    Ok(intervals.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / intervals.len() as f64)
}

/// Monte Carlo standard error of the bias: `sqrt(var(est) / S)`.
pub fn mc_se_of_bias(est: &[f64]) -> Result<f64> {
    Ok(empirical_se(est)? / (est.len() as f64).sqrt())
}

/// Metrics for one parameter across converged replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterMetrics {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    /// Relative bias, or absolute bias when `absolute` is set.
    pub bias: f64,
    pub empirical_se: f64,
    /// Relative RMSE, or absolute RMSE when `absolute` is set.
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub mc_se_of_bias: f64,
    /// The true value is zero, so bias and RMSE are reported on the absolute scale.
    pub absolute: bool,
}

impl ParameterMetrics {
    pub fn compute(name: &str, est: &[f64], intervals: &[Option<(f64, f64)>], truth: f64) -> Result<Self> {
        need(est, 2)?;
        let absolute = truth == 0.0;
        let ivs: Vec<(f64, f64)> = intervals.iter().flatten().copied().collect();
        Ok(Self {
            name: name.to_string(),
            truth,
            mean_estimate: mean(est),
            bias: if absolute { bias(est, truth)? } else { relative_bias(est, truth)? },
            empirical_se: empirical_se(est)?,
            rmse: if absolute { rmse(est, truth)? } else { relative_rmse(est, truth)? },
            coverage: if ivs.len() == intervals.len() { Some(coverage(&ivs, truth)?) } else { None },
            mc_se_of_bias: mc_se_of_bias(est)?,
            absolute,
        })
    }
}
