//! Growth-model vocabulary: measurement occasions, outcome functional forms,
//! and the trait/state decomposition of a time-varying covariate (TVC).
//!
//! The TVC follows a latent basis growth model written as a piecewise linear
//! function of time. Its baseline `eta0` is the trait feature; the slope of
//! interval `j` is `eta1 * rates[j-1]` and forms the state features (either as
//! interval slopes or as interval changes, i.e. slope times interval length).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurement times of one individual, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occasions(Vec<f64>);

impl Occasions {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        validate_times(&times)?;
        Ok(Self(times))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn last(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// Checks that `times` has at least two finite, strictly increasing entries.
pub fn validate_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::Occasions(format!(
            "need at least 2 occasions, got {}",
            times.len()
        )));
    }
    for (j, t) in times.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::Occasions(format!("time {} is not finite", j + 1)));
        }
    }
    for j in 1..times.len() {
        if times[j] <= times[j - 1] {
            return Err(Error::Occasions(format!(
                "times must be strictly increasing: t_{} = {} <= t_{} = {}",
                j + 1,
                times[j],
                j,
                times[j - 1]
            )));
        }
    }
    Ok(())
}

/// Which functional form the outcome trajectory takes, without coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    Linear,
    Quadratic,
    NegativeExponential,
    JenssBayley,
    BilinearSpline,
}

impl FormKind {
    /// Number of outcome growth factors.
    pub fn n_factors(self) -> usize {
        match self {
            FormKind::Linear | FormKind::NegativeExponential => 2,
            FormKind::Quadratic | FormKind::JenssBayley | FormKind::BilinearSpline => 3,
        }
    }

    /// Whether the form carries a class-level nonlinear coefficient.
    pub fn has_coefficient(self) -> bool {
        matches!(
            self,
            FormKind::NegativeExponential | FormKind::JenssBayley | FormKind::BilinearSpline
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FormKind::Linear => "linear",
            FormKind::Quadratic => "quadratic",
            FormKind::NegativeExponential => "negexp",
            FormKind::JenssBayley => "jenss",
            FormKind::BilinearSpline => "bilinear",
        }
    }

    /// Growth-factor names on the reporting scale.
    pub fn factor_names(self) -> &'static [&'static str] {
        match self {
            FormKind::Linear => &["eta0", "eta1"],
            FormKind::NegativeExponential => &["eta0", "eta1"],
            FormKind::Quadratic | FormKind::JenssBayley | FormKind::BilinearSpline => {
                &["eta0", "eta1", "eta2"]
            }
        }
    }

    pub fn coefficient_name(self) -> Option<&'static str> {
        match self {
            FormKind::NegativeExponential => Some("b"),
            FormKind::JenssBayley => Some("c"),
            FormKind::BilinearSpline => Some("knot"),
            _ => None,
        }
    }
}

impl std::str::FromStr for FormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FormKind::Linear),
            "quadratic" => Ok(FormKind::Quadratic),
            "negexp" | "negative_exponential" => Ok(FormKind::NegativeExponential),
            "jenss" | "jenss_bayley" => Ok(FormKind::JenssBayley),
            "bilinear" | "bilinear_spline" => Ok(FormKind::BilinearSpline),
            other => Err(Error::Parse(format!("unknown functional form `{other}`"))),
        }
    }
}

/// Outcome functional form together with its class-level coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalForm {
    Linear,
    Quadratic,
    NegativeExponential { rate: f64 },
    JenssBayley { rate: f64 },
    BilinearSpline { knot: f64 },
}

impl FunctionalForm {
    pub fn kind(&self) -> FormKind {
        match self {
            FunctionalForm::Linear => FormKind::Linear,
            FunctionalForm::Quadratic => FormKind::Quadratic,
            FunctionalForm::NegativeExponential { .. } => FormKind::NegativeExponential,
            FunctionalForm::JenssBayley { .. } => FormKind::JenssBayley,
            FunctionalForm::BilinearSpline { .. } => FormKind::BilinearSpline,
        }
    }

    pub fn n_factors(&self) -> usize {
        self.kind().n_factors()
    }

    pub fn coefficient(&self) -> Option<f64> {
        match *self {
            FunctionalForm::NegativeExponential { rate } => Some(rate),
            FunctionalForm::JenssBayley { rate } => Some(rate),
            FunctionalForm::BilinearSpline { knot } => Some(knot),
            _ => None,
        }
    }

    /// Builds a form of `kind` carrying `coef` (ignored for coefficient-free forms).
    pub fn from_kind(kind: FormKind, coef: f64) -> Self {
        match kind {
            FormKind::Linear => FunctionalForm::Linear,
            FormKind::Quadratic => FunctionalForm::Quadratic,
            FormKind::NegativeExponential => FunctionalForm::NegativeExponential { rate: coef },
            FormKind::JenssBayley => FunctionalForm::JenssBayley { rate: coef },
            FormKind::BilinearSpline => FunctionalForm::BilinearSpline { knot: coef },
        }
    }

    /// Checks the coefficient constraints that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        match *self {
            FunctionalForm::NegativeExponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                Err(Error::Parameter(format!(
                    "negative exponential rate must be positive, got {rate}"
                )))
            }
            FunctionalForm::JenssBayley { rate } if !(rate < 0.0 && rate.is_finite()) => Err(
                Error::Parameter(format!("Jenss-Bayley rate must be negative, got {rate}")),
            ),
            FunctionalForm::BilinearSpline { knot } if !knot.is_finite() => {
                Err(Error::Parameter(format!("knot must be finite, got {knot}")))
            }
            _ => Ok(()),
        }
    }

    /// Checks the coefficient against a particular set of occasions.
    pub fn validate_for(&self, times: &[f64]) -> Result<()> {
        self.validate()?;
        if let FunctionalForm::BilinearSpline { knot } = *self {
            let (lo, hi) = (times[0], times[times.len() - 1]);
            if !(knot > lo && knot < hi) {
                return Err(Error::Parameter(format!(
                    "knot {knot} outside the observed time range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Writes the outcome loading row for time `t` into `row`.
    ///
    /// The bilinear spline uses the reparameterised basis `(1, t - knot, |t - knot|)`.
    #[inline]
    pub fn loading_row(&self, t: f64, row: &mut [f64]) {
        row[0] = 1.0;
        match *self {
            FunctionalForm::Linear => row[1] = t,
            FunctionalForm::Quadratic => {
                row[1] = t;
                row[2] = t * t;
            }
            FunctionalForm::NegativeExponential { rate } => row[1] = 1.0 - (-rate * t).exp(),
            FunctionalForm::JenssBayley { rate } => {
                row[1] = t;
                row[2] = (rate * t).exp() - 1.0;
            }
            FunctionalForm::BilinearSpline { knot } => {
                row[1] = t - knot;
                row[2] = (t - knot).abs();
            }
        }
    }

    /// Value of the trajectory with reporting-scale growth factors `eta` at time `t`.
    pub fn evaluate(&self, eta: &[f64], t: f64) -> f64 {
        match *self {
            FunctionalForm::BilinearSpline { knot } => {
                if t < knot {
                    eta[0] + eta[1] * t
                } else {
                    eta[0] + eta[1] * knot + eta[2] * (t - knot)
                }
            }
            _ => {
                let mut row = [0.0; 3];
                self.loading_row(t, &mut row);
                (0..self.n_factors()).map(|c| row[c] * eta[c]).sum()
            }
        }
    }
}

/// How the state features of the TVC are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvcDecomposition {
    /// Interval-specific slopes: `eta1 * rates[j-1]`.
    IntervalSlopes,
    /// Interval-specific changes: slope times interval length.
    IntervalChanges,
}

impl std::str::FromStr for TvcDecomposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slopes" | "interval_slopes" => Ok(TvcDecomposition::IntervalSlopes),
            "changes" | "interval_changes" => Ok(TvcDecomposition::IntervalChanges),
            other => Err(Error::Parse(format!("unknown decomposition `{other}`"))),
        }
    }
}

/// Individual TVC growth factors: baseline (trait) and first-interval slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvcGrowthFactors {
    pub eta0: f64,
    pub eta1: f64,
}

/// Relative rates of change of the TVC, one per interval, first fixed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRates(Vec<f64>);

impl RelativeRates {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Parameter("relative rates cannot be empty".into()));
        }
        if rates[0] != 1.0 {
            return Err(Error::Parameter(format!(
                "first relative rate must be exactly 1, got {}",
                rates[0]
            )));
        }
        if let Some(r) = rates.iter().find(|r| !r.is_finite()) {
            return Err(Error::Parameter(format!("relative rate {r} is not finite")));
        }
        Ok(Self(rates))
    }

    /// Rates from the freely estimated tail (`rates[1..]`).
    pub fn from_free(free: &[f64]) -> Result<Self> {
        let mut v = Vec::with_capacity(free.len() + 1);
        v.push(1.0);
        v.extend_from_slice(free);
        Self::new(v)
    }

    /// All-unit rates for `n_intervals` intervals (a linear TVC).
    pub fn linear(n_intervals: usize) -> Self {
        Self(vec![1.0; n_intervals])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn free(&self) -> &[f64] {
        &self.0[1..]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_rates_len(times: &[f64], rates: &[f64]) -> Result<()> {
    if rates.len() + 1 != times.len() {
        return Err(Error::Dimension(format!(
            "{} occasions need {} relative rates, got {}",
            times.len(),
            times.len() - 1,
            rates.len()
        )));
    }
    Ok(())
}

/// Cumulative TVC loading (second column of the TVC loading matrix) into `out`.
#[inline]
pub(crate) fn fill_tvc_cumulative(times: &[f64], rates: &[f64], out: &mut [f64]) {
    out[0] = 0.0;
    for j in 1..times.len() {
        out[j] = out[j - 1] + rates[j - 1] * (times[j] - times[j - 1]);
    }
}

/// Per-unit-`eta1` state feature multipliers into `out` (first entry 0).
#[inline]
pub(crate) fn fill_state_multipliers(
    times: &[f64],
    rates: &[f64],
    decomposition: TvcDecomposition,
    out: &mut [f64],
) {
    out[0] = 0.0;
    for j in 1..times.len() {
        out[j] = match decomposition {
            TvcDecomposition::IntervalSlopes => rates[j - 1],
            TvcDecomposition::IntervalChanges => rates[j - 1] * (times[j] - times[j - 1]),
        };
    }
}

/// TVC loading matrix (`J x 2`): a column of ones and the cumulative
/// rate-weighted elapsed time.
pub fn tvc_loadings(occasions: &Occasions, rates: &RelativeRates) -> Result<DMatrix<f64>> {
    let times = occasions.as_slice();
    check_rates_len(times, rates.as_slice())?;
    let mut cum = vec![0.0; times.len()];
    fill_tvc_cumulative(times, rates.as_slice(), &mut cum);
    Ok(DMatrix::from_fn(times.len(), 2, |r, c| if c == 0 { 1.0 } else { cum[r] }))
}

/// State features of the TVC for one individual (length `J`, first entry 0).
pub fn state_features(
    factors: TvcGrowthFactors,
    occasions: &Occasions,
    rates: &RelativeRates,
    decomposition: TvcDecomposition,
) -> Result<Vec<f64>> {
    let times = occasions.as_slice();
    check_rates_len(times, rates.as_slice())?;
    let mut out = vec![0.0; times.len()];
    fill_state_multipliers(times, rates.as_slice(), decomposition, &mut out);
    out.iter_mut().for_each(|v| *v *= factors.eta1);
    Ok(out)
}

/// Outcome loading matrix (`J x C`) for the functional form.
pub fn outcome_loadings(form: &FunctionalForm, occasions: &Occasions) -> Result<DMatrix<f64>> {
    let times = occasions.as_slice();
    form.validate_for(times)?;
    let c = form.n_factors();
    let mut m = DMatrix::zeros(times.len(), c);
    let mut row = [0.0; 3];
    for (j, &t) in times.iter().enumerate() {
        form.loading_row(t, &mut row);
        for k in 0..c {
            m[(j, k)] = row[k];
        }
    }
    Ok(m)
}

/// Maps bilinear growth factors `(eta0, eta1, eta2)` to the reparameterised
/// basis that pairs with loadings `(1, t - knot, |t - knot|)`.
pub fn reparameterize_bilinear(eta: [f64; 3], knot: f64) -> [f64; 3] {
    [
        eta[0] + knot * eta[1],
        (eta[1] + eta[2]) / 2.0,
        (eta[2] - eta[1]) / 2.0,
    ]
}

/// Inverse of [`reparameterize_bilinear`].
pub fn inverse_reparameterize(eta_r: [f64; 3], knot: f64) -> [f64; 3] {
    let eta1 = eta_r[1] - eta_r[2];
    let eta2 = eta_r[1] + eta_r[2];
    [eta_r[0] - knot * eta1, eta1, eta2]
}

/// Linear map taking original bilinear growth factors to the reparameterised basis.
pub fn bilinear_transform(knot: f64) -> [[f64; 3]; 3] {
    [[1.0, knot, 0.0], [0.0, 0.5, 0.5], [0.0, -0.5, 0.5]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn occ(t: &[f64]) -> Occasions {
        Occasions::new(t.to_vec()).unwrap()
    }

    fn rates(r: &[f64]) -> RelativeRates {
        RelativeRates::new(r.to_vec()).unwrap()
    }

    /// Interval-sum oracle written independently of the cumulative recursion.
    fn cumulative_oracle(t: &[f64], r: &[f64], j: usize) -> f64 {
        (1..=j).map(|m| r[m - 1] * (t[m] - t[m - 1])).sum()
    }

    #[test]
    fn tvc_loadings_examples() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let r = [1.0, 0.9, 0.8];
        let m = tvc_loadings(&occ(&t), &rates(&r)).unwrap();
        let expect = [0.0, 1.0, 1.9, 2.7];
        for j in 0..4 {
            assert_eq!(m[(j, 0)], 1.0);
            assert_abs_diff_eq!(m[(j, 1)], expect[j], epsilon = 1e-12);
            assert_abs_diff_eq!(m[(j, 1)], cumulative_oracle(&t, &r, j), epsilon = 1e-12);
        }

        let m = tvc_loadings(&occ(&[0.0, 1.0, 2.0]), &rates(&[1.0, 1.0])).unwrap();
        assert_eq!(m.column(1).as_slice(), &[0.0, 1.0, 2.0]);

        let m = tvc_loadings(&occ(&[0.0, 0.8, 2.2]), &rates(&[1.0, 0.5])).unwrap();
        assert_abs_diff_eq!(m[(1, 1)], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(2, 1)], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn tvc_loadings_errors() {
        assert!(matches!(
            tvc_loadings(&occ(&[0.0, 1.0, 2.0]), &rates(&[1.0])),
            Err(Error::Dimension(_))
        ));
        assert!(Occasions::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(Occasions::new(vec![0.0, 2.0, 1.0]).is_err());
        assert!(RelativeRates::new(vec![0.9, 1.0]).is_err());
    }

    #[test]
    fn state_features_examples() {
        let f = TvcGrowthFactors { eta0: 0.0, eta1: 5.0 };
        let s = state_features(
            f,
            &occ(&[0.0, 1.0, 2.0]),
            &rates(&[1.0, 0.9]),
            TvcDecomposition::IntervalSlopes,
        )
        .unwrap();
        assert_abs_diff_eq!(s.as_slice(), [0.0, 5.0, 4.5].as_slice(), epsilon = 1e-12);

        let s = state_features(
            f,
            &occ(&[0.0, 1.0, 3.0]),
            &rates(&[1.0, 0.9]),
            TvcDecomposition::IntervalChanges,
        )
        .unwrap();
        assert_abs_diff_eq!(s.as_slice(), [0.0, 5.0, 9.0].as_slice(), epsilon = 1e-12);

        let zero = TvcGrowthFactors { eta0: 3.0, eta1: 0.0 };
        let s = state_features(
            zero,
            &occ(&[0.0, 1.0, 3.0, 4.0]),
            &rates(&[1.0, -0.3, 2.0]),
            TvcDecomposition::IntervalChanges,
        )
        .unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outcome_loadings_examples() {
        let m = outcome_loadings(&FunctionalForm::Linear, &occ(&[0.0, 1.0, 2.0])).unwrap();
        assert_eq!(m.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);

        let knot = FunctionalForm::BilinearSpline { knot: 5.0 };
        let m = outcome_loadings(&knot, &occ(&[0.0, 3.0, 5.0, 9.0])).unwrap();
        assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, -2.0, 2.0]);
        assert_eq!(m.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);

        let ne = FunctionalForm::NegativeExponential { rate: 0.7 };
        let m = outcome_loadings(&ne, &occ(&[0.0, 1.0, 2.0])).unwrap();
        assert_eq!(m.ncols(), 2);
        assert_eq!(m[(0, 1)], 0.0);

        let jb = FunctionalForm::JenssBayley { rate: -0.5 };
        let m = outcome_loadings(&jb, &occ(&[0.0, 1.0, 2.0])).unwrap();
        assert_abs_diff_eq!(m[(2, 2)], (-1.0f64).exp() - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn outcome_loadings_rejects_bad_coefficients() {
        let o = occ(&[0.0, 1.0, 2.0]);
        for form in [
            FunctionalForm::BilinearSpline { knot: 2.0 },
            FunctionalForm::BilinearSpline { knot: -1.0 },
            FunctionalForm::NegativeExponential { rate: 0.0 },
            FunctionalForm::JenssBayley { rate: 0.1 },
        ] {
            assert!(outcome_loadings(&form, &o).is_err(), "{form:?}");
        }
    }

    #[test]
    fn first_row_second_column() {
        let o = occ(&[0.0, 1.0, 2.0, 3.0]);
        for form in [
            FunctionalForm::Linear,
            FunctionalForm::Quadratic,
            FunctionalForm::NegativeExponential { rate: 0.4 },
            FunctionalForm::JenssBayley { rate: -0.4 },
        ] {
            assert_eq!(outcome_loadings(&form, &o).unwrap()[(0, 1)], 0.0);
        }
        let m = outcome_loadings(&FunctionalForm::BilinearSpline { knot: 1.5 }, &o).unwrap();
        assert_eq!(m[(0, 1)], -1.5);
    }

    #[test]
    fn reparameterize_examples() {
        let r = reparameterize_bilinear([48.0, 4.5, 1.65], 5.0);
        assert_abs_diff_eq!(r.as_slice(), [70.5, 3.075, -1.425].as_slice(), epsilon = 1e-12);
        let r = reparameterize_bilinear([0.0, 2.5, 2.5], 3.0);
        assert_abs_diff_eq!(r.as_slice(), [7.5, 2.5, 0.0].as_slice(), epsilon = 1e-12);
    }

    #[test]
    fn reparameterized_loadings_match_piecewise_curve() {
        let form = FunctionalForm::BilinearSpline { knot: 4.3 };
        let eta = [48.0, 4.5, 1.65];
        let eta_r = reparameterize_bilinear(eta, 4.3);
        for &t in &[0.0, 1.2, 4.3, 6.0, 9.1] {
            let mut row = [0.0; 3];
            form.loading_row(t, &mut row);
            let via_basis: f64 = (0..3).map(|c| row[c] * eta_r[c]).sum();
            assert_abs_diff_eq!(via_basis, form.evaluate(&eta, t), epsilon = 1e-10);
        }
    }

    proptest! {
        #[test]
        fn reparameterize_round_trip(
            e0 in -100.0f64..100.0, e1 in -10.0f64..10.0, e2 in -10.0f64..10.0, g in -5.0f64..15.0
        ) {
            let back = inverse_reparameterize(reparameterize_bilinear([e0, e1, e2], g), g);
            prop_assert!((back[0] - e0).abs() < 1e-10);
            prop_assert!((back[1] - e1).abs() < 1e-12);
            prop_assert!((back[2] - e2).abs() < 1e-12);
            let fwd = reparameterize_bilinear(inverse_reparameterize([e0, e1, e2], g), g);
            prop_assert!((fwd[0] - e0).abs() < 1e-10);
        }

        #[test]
        fn changes_are_slopes_times_interval(
            gaps in proptest::collection::vec(0.1f64..3.0, 2..9),
            eta1 in -5.0f64..5.0,
            tail in proptest::collection::vec(-1.0f64..2.0, 8),
        ) {
            let mut t = vec![0.0];
            for g in &gaps { t.push(t.last().unwrap() + g); }
            let mut r = vec![1.0];
            r.extend_from_slice(&tail[..gaps.len() - 1]);
            let o = occ(&t);
            let rr = rates(&r);
            let f = TvcGrowthFactors { eta0: 0.0, eta1 };
            let s = state_features(f, &o, &rr, TvcDecomposition::IntervalSlopes).unwrap();
            let c = state_features(f, &o, &rr, TvcDecomposition::IntervalChanges).unwrap();
            prop_assert_eq!(s[0], 0.0);
            for j in 1..t.len() {
                prop_assert!((c[j] - s[j] * (t[j] - t[j - 1])).abs() < 1e-12);
            }
        }

        #[test]
        fn tvc_column_nondecreasing_for_positive_rates(
            gaps in proptest::collection::vec(0.1f64..3.0, 2..9),
            tail in proptest::collection::vec(0.01f64..2.0, 8),
        ) {
            let mut t = vec![1.0];
            for g in &gaps { t.push(t.last().unwrap() + g); }
            let mut r = vec![1.0];
            r.extend_from_slice(&tail[..gaps.len() - 1]);
            let m = tvc_loadings(&occ(&t), &rates(&r)).unwrap();
            for j in 0..t.len() {
                prop_assert_eq!(m[(j, 0)], 1.0);
                if j > 0 { prop_assert!(m[(j, 1)] >= m[(j - 1, 1)]); }
            }
        }
    }

    #[test]
    fn unit_rates_reproduce_linear_loadings() {
        let o = occ(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let x = tvc_loadings(&o, &RelativeRates::linear(4)).unwrap();
        let y = outcome_loadings(&FunctionalForm::Linear, &o).unwrap();
        assert_eq!(x, y);
    }
}
