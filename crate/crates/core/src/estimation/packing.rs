//! Bijection between the constrained parameter set and an unconstrained
//! vector for the optimiser.
//!
//! Variances are logged, correlations (including the TIC/baseline correlation
//! and the residual x/y correlation) pass through `atanh`, covariance matrices
//! use a log-Cholesky factor, and everything else is left as is. The
//! reporting vector has the same length and ordering as the packed vector.

use nalgebra::DMatrix;

use super::{GatingParameters, ModelParameters, ModelSpec};
use crate::error::{Error, Result};
use crate::model::{FormKind, FunctionalForm, RelativeRates};
use crate::moments::ClassParameters;

/// Position of every packed coordinate for a given spec and number of occasions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub spec: ModelSpec,
    pub n_occasions: usize,
    pub class_len: usize,
    pub gating_len: usize,
}

impl ParameterLayout {
    pub fn new(spec: &ModelSpec, n_occasions: usize) -> Result<Self> {
        spec.validate()?;
        if n_occasions < 2 {
            return Err(Error::Dimension("need at least two occasions".into()));
        }
        let c = spec.form.n_factors();
        let mut len = c + c * (c + 1) / 2 + 1;
        if spec.use_tic {
            len += 2 + c;
        }
        if spec.use_tvc {
            len += 5 + (n_occasions - 2) + c + 1 + 2;
        }
        if spec.use_tic && spec.use_tvc {
            len += 1;
        }
        if spec.form.has_coefficient() {
            len += 1;
        }
        Ok(Self {
            spec: spec.clone(),
            n_occasions,
            class_len: len,
            gating_len: 1 + spec.n_gating_tics,
        })
    }

    pub fn len(&self) -> usize {
        self.spec.n_classes * self.class_len + (self.spec.n_classes - 1) * self.gating_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_range(&self, k: usize) -> std::ops::Range<usize> {
        k * self.class_len..(k + 1) * self.class_len
    }

    pub fn gating_start(&self) -> usize {
        self.spec.n_classes * self.class_len
    }

    /// Class owning packed coordinate `i`, or `None` for gating coordinates.
    pub fn class_of(&self, i: usize) -> Option<usize> {
        (i < self.gating_start()).then(|| i / self.class_len)
    }

    /// Coordinates where the likelihood is only piecewise smooth (the
    /// bilinear knot, which moves across individual measurement times).
    pub fn is_nonsmooth(&self, i: usize) -> bool {
        self.spec.form == FormKind::BilinearSpline
            && i < self.gating_start()
            && i % self.class_len == self.class_len - 1
    }

    /// Offset of the form coefficient within a class block.
    pub fn coefficient_offset(&self) -> Option<usize> {
        self.spec.form.has_coefficient().then(|| self.class_len - 1)
    }

    pub fn n_free_parameters(&self) -> usize {
        self.len()
    }
}

fn log_cholesky(m: &DMatrix<f64>, out: &mut Vec<f64>, name: &str) -> Result<()> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Parameter(format!("{name} is not positive definite")))?;
    let l = chol.l();
    for r in 0..m.nrows() {
        for s in 0..=r {
            out.push(if r == s { l[(r, r)].ln() } else { l[(r, s)] });
        }
    }
    Ok(())
}

fn from_log_cholesky(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    let mut it = v.iter();
    for r in 0..n {
        for s in 0..=r {
            let x = *it.next().unwrap();
            l[(r, s)] = if r == s { x.exp() } else { x };
        }
    }
    &l * l.transpose()
}

fn positive(v: f64, name: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v.ln())
    } else {
        Err(Error::Parameter(format!("{name} must be positive, got {v}")))
    }
}

fn correlation(v: f64, name: &str) -> Result<f64> {
    if v.abs() < 1.0 {
        Ok(v.atanh())
    } else {
        Err(Error::Parameter(format!("{name} must lie in (-1, 1), got {v}")))
    }
}

fn pack_coefficient(form: &FunctionalForm) -> Result<Option<f64>> {
    Ok(match *form {
        FunctionalForm::NegativeExponential { rate } => Some(positive(rate, "negative exponential rate")?),
        FunctionalForm::JenssBayley { rate } => Some(positive(-rate, "minus the Jenss-Bayley rate")?),
        FunctionalForm::BilinearSpline { knot } => Some(knot),
        _ => None,
    })
}

fn unpack_coefficient(kind: FormKind, v: f64) -> FunctionalForm {
    match kind {
        FormKind::NegativeExponential => FunctionalForm::NegativeExponential { rate: v.exp() },
        FormKind::JenssBayley => FunctionalForm::JenssBayley { rate: -v.exp() },
        other => FunctionalForm::from_kind(other, v),
    }
}

pub(crate) fn pack_class(p: &ClassParameters, layout: &ParameterLayout, out: &mut Vec<f64>) -> Result<()> {
    let spec = &layout.spec;
    if p.rates.len() + 1 != layout.n_occasions {
        return Err(Error::Dimension("relative rates do not match the occasions".into()));
    }
    if spec.use_tic {
        out.push(p.mu_x);
        out.push(positive(p.phi_x, "phi_x")?);
    }
    if spec.use_tvc {
        out.extend_from_slice(&p.mu_eta_x);
        let phi = DMatrix::from_fn(2, 2, |r, c| p.phi_eta_x[r][c]);
        log_cholesky(&phi, out, "phi_eta_x")?;
        out.extend_from_slice(p.rates.free());
    }
    out.extend_from_slice(&p.alpha_y);
    log_cholesky(&p.psi_eta_y, out, "psi_eta_y")?;
    if spec.use_tic {
        out.extend_from_slice(&p.beta_tic);
    }
    if spec.use_tvc {
        out.extend_from_slice(&p.beta_tvc);
        out.push(p.kappa);
    }
    if spec.use_tic && spec.use_tvc {
        out.push(correlation(p.rho_bl, "rho_bl")?);
    }
    if spec.use_tvc {
        out.push(positive(p.theta_x, "theta_x")?);
    }
    out.push(positive(p.theta_y, "theta_y")?);
    if spec.use_tvc {
        let r = p.theta_xy / (p.theta_x * p.theta_y).sqrt();
        out.push(correlation(r, "residual x/y correlation")?);
    }
    if let Some(v) = pack_coefficient(&p.form)? {
        out.push(v);
    }
    Ok(())
}

pub(crate) fn unpack_class(v: &[f64], layout: &ParameterLayout) -> ClassParameters {
    let spec = &layout.spec;
    let c = spec.form.n_factors();
    let mut p = super::default_class(spec, layout.n_occasions, 0.0);
    let mut i = 0;
    let mut take = |n: usize| {
        let s = &v[i..i + n];
        i += n;
        s
    };
    if spec.use_tic {
        p.mu_x = take(1)[0];
        p.phi_x = take(1)[0].exp();
    }
    if spec.use_tvc {
        let m = take(2);
        p.mu_eta_x = [m[0], m[1]];
        let phi = from_log_cholesky(take(3), 2);
        p.phi_eta_x = [[phi[(0, 0)], phi[(0, 1)]], [phi[(1, 0)], phi[(1, 1)]]];
        let free = take(layout.n_occasions - 2);
        let mut rates = Vec::with_capacity(free.len() + 1);
        rates.push(1.0);
        rates.extend_from_slice(free);
        p.rates = RelativeRates::from_free(&rates[1..]).unwrap_or_else(|_| RelativeRates::linear(layout.n_occasions - 1));
    }
    p.alpha_y = take(c).to_vec();
    p.psi_eta_y = from_log_cholesky(take(c * (c + 1) / 2), c);
    if spec.use_tic {
        p.beta_tic = take(c).to_vec();
    }
    if spec.use_tvc {
        p.beta_tvc = take(c).to_vec();
        p.kappa = take(1)[0];
    }
    if spec.use_tic && spec.use_tvc {
        p.rho_bl = take(1)[0].tanh();
    }
    if spec.use_tvc {
        p.theta_x = take(1)[0].exp();
    }
    p.theta_y = take(1)[0].exp();
    if spec.use_tvc {
        p.theta_xy = take(1)[0].tanh() * (p.theta_x * p.theta_y).sqrt();
    }
    if spec.form.has_coefficient() {
        p.form = unpack_coefficient(spec.form, take(1)[0]);
    }
    p
}

pub(crate) fn unpack_gating(v: &[f64], layout: &ParameterLayout) -> GatingParameters {
    let k_n = layout.spec.n_classes;
    let g = layout.gating_len;
    let start = layout.gating_start();
    let mut gating = GatingParameters::zeros(k_n, layout.spec.n_gating_tics);
    for k in 0..k_n - 1 {
        let s = &v[start + k * g..start + (k + 1) * g];
        gating.intercepts[k] = s[0];
        gating.coefficients[k] = s[1..].to_vec();
    }
    gating
}

/// Packs a parameter set into the unconstrained optimisation vector.
pub fn pack_parameters(theta: &ModelParameters, layout: &ParameterLayout) -> Result<Vec<f64>> {
    theta.check_against(&layout.spec, layout.n_occasions)?;
    let mut out = Vec::with_capacity(layout.len());
    for c in &theta.classes {
        pack_class(c, layout, &mut out)?;
    }
    for k in 0..theta.gating.intercepts.len() {
        out.push(theta.gating.intercepts[k]);
        out.extend_from_slice(&theta.gating.coefficients[k]);
    }
    debug_assert_eq!(out.len(), layout.len());
    Ok(out)
}

/// Inverse of [`pack_parameters`].
pub fn unpack_parameters(v: &[f64], layout: &ParameterLayout) -> Result<ModelParameters> {
    if v.len() != layout.len() {
        return Err(Error::Dimension(format!(
            "packed vector has length {}, layout expects {}",
            v.len(),
            layout.len()
        )));
    }
    let classes = (0..layout.spec.n_classes)
        .map(|k| unpack_class(&v[layout.class_range(k)], layout))
        .collect();
    Ok(ModelParameters { classes, gating: unpack_gating(v, layout) })
}

fn report_class(p: &ClassParameters, layout: &ParameterLayout, out: &mut Vec<f64>) {
    let spec = &layout.spec;
    let c = spec.form.n_factors();
    let lower = |m: &DMatrix<f64>, out: &mut Vec<f64>| {
        for r in 0..m.nrows() {
            for s in 0..=r {
                out.push(m[(r, s)]);
            }
        }
    };
    if spec.use_tic {
        out.push(p.mu_x);
        out.push(p.phi_x);
    }
    if spec.use_tvc {
        out.extend_from_slice(&p.mu_eta_x);
        out.extend_from_slice(&[p.phi_eta_x[0][0], p.phi_eta_x[1][0], p.phi_eta_x[1][1]]);
        out.extend_from_slice(p.rates.free());
    }
    out.extend_from_slice(&p.alpha_y[..c]);
    lower(&p.psi_eta_y, out);
    if spec.use_tic {
        out.extend_from_slice(&p.beta_tic);
    }
    if spec.use_tvc {
        out.extend_from_slice(&p.beta_tvc);
        out.push(p.kappa);
    }
    if spec.use_tic && spec.use_tvc {
        out.push(p.rho_bl);
    }
    if spec.use_tvc {
        out.push(p.theta_x);
    }
    out.push(p.theta_y);
    if spec.use_tvc {
        out.push(p.theta_xy);
    }
    if let Some(v) = p.form.coefficient() {
        out.push(v);
    }
}

/// Parameters on the reporting scale, aligned with [`parameter_names`].
pub fn reporting_vector(theta: &ModelParameters, layout: &ParameterLayout) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.len());
    for c in &theta.classes {
        report_class(c, layout, &mut out);
    }
    for k in 0..theta.gating.intercepts.len() {
        out.push(theta.gating.intercepts[k]);
        out.extend_from_slice(&theta.gating.coefficients[k]);
    }
    out
}

/// Human-readable names of the packed / reporting coordinates.
pub fn parameter_names(layout: &ParameterLayout) -> Vec<String> {
    let spec = &layout.spec;
    let factors = spec.form.factor_names();
    let mut names = Vec::with_capacity(layout.len());
    for k in 1..=spec.n_classes {
        let mut push = |s: String| names.push(format!("class{k}.{s}"));
        if spec.use_tic {
            push("mu_x".into());
            push("phi_x".into());
        }
        if spec.use_tvc {
            push("mu_eta_x.eta0".into());
            push("mu_eta_x.eta1".into());
            push("phi_eta_x.00".into());
            push("phi_eta_x.10".into());
            push("phi_eta_x.11".into());
            for j in 2..layout.n_occasions {
                push(format!("rate{j}"));
            }
        }
        for f in factors {
            push(format!("alpha_y.{f}"));
        }
        for r in 0..factors.len() {
            for s in 0..=r {
                push(format!("psi_y.{r}{s}"));
            }
        }
        if spec.use_tic {
            for f in factors {
                push(format!("beta_tic.{f}"));
            }
        }
        if spec.use_tvc {
            for f in factors {
                push(format!("beta_tvc.{f}"));
            }
            push("kappa".into());
        }
        if spec.use_tic && spec.use_tvc {
            push("rho_bl".into());
        }
        if spec.use_tvc {
            push("theta_x".into());
        }
        push("theta_y".into());
        if spec.use_tvc {
            push("theta_xy".into());
        }
        if let Some(n) = spec.form.coefficient_name() {
            push(n.into());
        }
    }
    for k in 2..=spec.n_classes {
        names.push(format!("gating{k}.intercept"));
        for g in 1..=spec.n_gating_tics {
            names.push(format!("gating{k}.xg{g}"));
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TvcDecomposition;
    use crate::moments::tests::demo_class;
    use proptest::prelude::*;

    fn layout(k: usize) -> ParameterLayout {
        ParameterLayout::new(&ModelSpec::full(k, FormKind::BilinearSpline, TvcDecomposition::IntervalSlopes), 10).unwrap()
    }

    #[test]
    fn counts_match_reference_models() {
        // Bilinear outcome-only: 11 per class, +1 gating intercept per extra class.
        for (k, n) in [(1, 11), (2, 23), (3, 35), (4, 47)] {
            let l = ParameterLayout::new(&ModelSpec::unconditional(k, FormKind::BilinearSpline), 9).unwrap();
            assert_eq!(l.len(), n);
        }
        // Full model with 9 waves: 35 per class, 3 gating coefficients per extra class.
        for (k, n) in [(1, 35), (2, 73), (3, 111)] {
            let spec = ModelSpec::full(k, FormKind::BilinearSpline, TvcDecomposition::IntervalChanges);
            assert_eq!(ParameterLayout::new(&spec, 9).unwrap().len(), n);
        }
        let l = layout(2);
        assert_eq!(parameter_names(&l).len(), l.len());
    }

    #[test]
    fn scalar_transforms() {
        let l = layout(1);
        let mut p = demo_class(10);
        p.phi_x = 1.0;
        p.rho_bl = 0.3;
        let v = pack_parameters(
            &ModelParameters { classes: vec![p], gating: GatingParameters::zeros(1, 2) },
            &l,
        )
        .unwrap();
        let names = parameter_names(&l);
        let at = |n: &str| v[names.iter().position(|x| x == n).unwrap()];
        assert_eq!(at("class1.phi_x"), 0.0);
        assert!((at("class1.rho_bl") - 0.3095196042031118).abs() < 1e-12);
        assert_eq!(at("class1.knot"), 4.5);
    }

    #[test]
    fn nonsmooth_marks_only_knots() {
        let l = layout(2);
        let names = parameter_names(&l);
        for i in 0..l.len() {
            assert_eq!(l.is_nonsmooth(i), names[i].ends_with(".knot"), "{}", names[i]);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(unpack_parameters(&[0.0; 3], &layout(1)), Err(Error::Dimension(_))));
    }

    fn arb_theta() -> impl Strategy<Value = ModelParameters> {
        (
            proptest::collection::vec(-2.0f64..2.0, 80),
            proptest::collection::vec(0.2f64..3.0, 20),
        )
            .prop_map(|(u, s)| {
                let mut classes = Vec::new();
                for k in 0..2 {
                    let o = 40 * k;
                    let mut p = demo_class(10);
                    p.mu_x = u[o];
                    p.phi_x = s[10 * k];
                    p.mu_eta_x = [u[o + 1], u[o + 2]];
                    let a = s[10 * k + 1];
                    let c = 0.2 * u[o + 3] * (a * (a + 1.0)).sqrt();
                    p.phi_eta_x = [[a, c], [c, a + 1.0]];
                    let mut r = vec![1.0];
                    r.extend((0..8).map(|j| u[o + 4 + j]));
                    p.rates = RelativeRates::new(r).unwrap();
                    p.alpha_y = vec![u[o + 12] * 10.0, u[o + 13], u[o + 14]];
                    let lmat = DMatrix::from_row_slice(3, 3, &[s[10 * k + 2], 0.0, 0.0, u[o + 15], s[10 * k + 3], 0.0, u[o + 16], u[o + 17], s[10 * k + 4]]);
                    p.psi_eta_y = &lmat * lmat.transpose();
                    p.beta_tic = vec![u[o + 18], u[o + 19], u[o + 20]];
                    p.beta_tvc = vec![u[o + 21], u[o + 22], u[o + 23]];
                    p.kappa = u[o + 24];
                    p.rho_bl = u[o + 25] * 0.45;
                    p.theta_x = s[10 * k + 5];
                    p.theta_y = s[10 * k + 6];
                    p.theta_xy = u[o + 26] * 0.45 * (p.theta_x * p.theta_y).sqrt();
                    p.form = FunctionalForm::BilinearSpline { knot: 4.5 + u[o + 27] };
                    classes.push(p);
                }
                let gating = GatingParameters { intercepts: vec![u[79]], coefficients: vec![vec![u[78], u[77]]] };
                ModelParameters { classes, gating }
            })
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(theta in arb_theta()) {
            let l = layout(2);
            let v = pack_parameters(&theta, &l).unwrap();
            let back = unpack_parameters(&v, &l).unwrap();
            let a = reporting_vector(&theta, &l);
            let b = reporting_vector(&back, &l);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{} vs {}", x, y);
            }
            let v2 = pack_parameters(&back, &l).unwrap();
            for (x, y) in v.iter().zip(&v2) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn other_forms_round_trip() {
        for (kind, coef) in [(FormKind::NegativeExponential, 0.7), (FormKind::JenssBayley, -0.4), (FormKind::Quadratic, 0.0), (FormKind::Linear, 0.0)] {
            let spec = ModelSpec::full(1, kind, TvcDecomposition::IntervalSlopes);
            let l = ParameterLayout::new(&spec, 5).unwrap();
            let mut p = super::super::default_class(&spec, 5, coef);
            p.theta_xy = 0.2;
            let theta = ModelParameters { classes: vec![p], gating: GatingParameters::zeros(1, 2) };
            let v = pack_parameters(&theta, &l).unwrap();
            let back = unpack_parameters(&v, &l).unwrap();
            assert_eq!(back.classes[0].form.kind(), kind);
            if let Some(c) = back.classes[0].form.coefficient() {
                assert!((c - coef).abs() < 1e-12);
            }
            assert!((back.classes[0].theta_xy - 0.2).abs() < 1e-12);
        }
    }
}
