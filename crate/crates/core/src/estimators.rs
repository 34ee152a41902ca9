//! OLS treatment-effect estimators on datasets, and their closed-form
//! counterparts on SEMs.

use std::fmt;
use std::io::Write;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{dot, fwl_with, LinalgError, Matrix, Qr, DEGENERATE_TOLERANCE};
use crate::sem::{LinearSem, SemError};
use crate::simulate::{format_float, Dataset};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("estimator needs unobserved column `{0}`")]
    InfeasibleEstimator(String),
    #[error("invalid estimator: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sem(#[from] SemError),
    #[error("csv: {0}")]
    Csv(String),
}

impl EstimatorError {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorError::UnknownColumn(_) => "UnknownColumn",
            EstimatorError::InfeasibleEstimator(_) => "InfeasibleEstimator",
            EstimatorError::InvalidSpec(_) => "InvalidSpec",
            EstimatorError::Linalg(e) => e.name(),
            EstimatorError::Sem(e) => e.name(),
            EstimatorError::Csv(_) => "CsvError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorLabel {
    Naive,
    Adjusted,
    Oracle,
    Custom(String),
}

impl EstimatorLabel {
    pub fn as_str(&self) -> &str {
        match self {
            EstimatorLabel::Naive => "naive",
            EstimatorLabel::Adjusted => "adjusted",
            EstimatorLabel::Oracle => "oracle",
            EstimatorLabel::Custom(s) => s,
        }
    }
}

impl fmt::Display for EstimatorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for EstimatorLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// Outcome regressed on treatment, an implied intercept, and `regressors`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSpec {
    pub label: EstimatorLabel,
    pub regressors: Vec<String>,
    /// Refuse columns flagged unobserved.
    pub feasible_only: bool,
}

impl EstimatorSpec {
    pub fn naive() -> Self {
        EstimatorSpec {
            label: EstimatorLabel::Naive,
            regressors: Vec::new(),
            feasible_only: true,
        }
    }

    pub fn adjusted<S: Into<String>>(regressors: impl IntoIterator<Item = S>) -> Self {
        EstimatorSpec {
            label: EstimatorLabel::Adjusted,
            regressors: regressors.into_iter().map(Into::into).collect(),
            feasible_only: true,
        }
    }

    pub fn oracle<S: Into<String>>(regressors: impl IntoIterator<Item = S>) -> Self {
        EstimatorSpec {
            label: EstimatorLabel::Oracle,
            regressors: regressors.into_iter().map(Into::into).collect(),
            feasible_only: false,
        }
    }

    pub fn custom<S: Into<String>>(
        name: impl Into<String>,
        regressors: impl IntoIterator<Item = S>,
        feasible_only: bool,
    ) -> Self {
        EstimatorSpec {
            label: EstimatorLabel::Custom(name.into()),
            regressors: regressors.into_iter().map(Into::into).collect(),
            feasible_only,
        }
    }

    pub fn validate(&self, treatment: &str, outcome: &str) -> Result<(), EstimatorError> {
        if self.label == EstimatorLabel::Naive && !self.regressors.is_empty() {
            return Err(EstimatorError::InvalidSpec(
                "naive takes no regressors".into(),
            ));
        }
        if self.label == EstimatorLabel::Adjusted && !self.feasible_only {
            return Err(EstimatorError::InvalidSpec(
                "adjusted must use observed regressors only".into(),
            ));
        }
        for (i, r) in self.regressors.iter().enumerate() {
            if r == treatment || r == outcome {
                return Err(EstimatorError::InvalidSpec(format!(
                    "`{r}` cannot be a regressor"
                )));
            }
            if self.regressors[..i].contains(r) {
                return Err(EstimatorError::InvalidSpec(format!("`{r}` listed twice")));
            }
        }
        Ok(())
    }
}

fn column<'a>(ds: &'a Dataset, name: &str) -> Result<&'a [f64], EstimatorError> {
    ds.column(name)
        .ok_or_else(|| EstimatorError::UnknownColumn(name.to_string()))
}

fn controls_qr(
    ds: &Dataset,
    controls: &[String],
    feasible_only: bool,
) -> Result<Qr, EstimatorError> {
    let mut cols = Vec::with_capacity(controls.len());
    for c in controls {
        let col = column(ds, c)?;
        if feasible_only && ds.is_observed(c) == Some(false) {
            return Err(EstimatorError::InfeasibleEstimator(c.clone()));
        }
        cols.push(col);
    }
    Ok(Qr::new(&Matrix::with_intercept(ds.n(), &cols)?)?)
}

/// FWL coefficient on `treatment` in the regression of `outcome` on
/// `[1 | treatment | regressors]`.
pub fn estimate(
    ds: &Dataset,
    treatment: &str,
    outcome: &str,
    spec: &EstimatorSpec,
) -> Result<f64, EstimatorError> {
    spec.validate(treatment, outcome)?;
    let a = column(ds, treatment)?;
    let y = column(ds, outcome)?;
    let qr = controls_qr(ds, &spec.regressors, spec.feasible_only)?;
    Ok(fwl_with(&qr, a, y)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmplificationEstimate {
    /// Treatment residual variance given the controls, `a'M_Z a / n`.
    pub ssr_over_n: f64,
    /// `a'M_1 a / n`.
    pub marginal_var: f64,
    pub r_squared: f64,
    /// `marginal_var / ssr_over_n`.
    pub factor: f64,
}

/// How much conditioning on `controls` shrinks the treatment's residual variance.
pub fn amplification_factor(
    ds: &Dataset,
    treatment: &str,
    controls: &[String],
) -> Result<AmplificationEstimate, EstimatorError> {
    let a = column(ds, treatment)?;
    let n = ds.n() as f64;
    let qr = controls_qr(ds, controls, true)?;
    let centered = Qr::new(&Matrix::intercept(ds.n())?)?.annihilate(a)?;
    let tss = dot(&centered, &centered);
    if !(tss > DEGENERATE_TOLERANCE * dot(a, a)) {
        return Err(LinalgError::ConstantTreatment.into());
    }
    let ra = qr.annihilate(a)?;
    let ssr = dot(&ra, &ra);
    if !(ssr >= DEGENERATE_TOLERANCE * dot(a, a)) || ssr == 0.0 {
        return Err(LinalgError::DegenerateTreatment.into());
    }
    // With no controls M_Z = M_1; use the identical number so factor is exactly 1.
    let ssr = if controls.is_empty() {
        tss
    } else {
        ssr.min(tss)
    };
    Ok(AmplificationEstimate {
        ssr_over_n: ssr / n,
        marginal_var: tss / n,
        r_squared: 1.0 - ssr / tss,
        factor: tss / ssr,
    })
}

/// Population OLS coefficient on `treatment` minus the direct edge coefficient.
pub fn closed_form_bias(
    sem: &LinearSem,
    treatment: &str,
    outcome: &str,
    spec: &EstimatorSpec,
) -> Result<f64, EstimatorError> {
    spec.validate(treatment, outcome)?;
    let mut regs: Vec<&str> = vec![treatment];
    regs.extend(spec.regressors.iter().map(String::as_str));
    let coef = sem.population_regression(outcome, &regs)?;
    Ok(coef[0] - sem.coefficient(treatment, outcome)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonlinearComponents {
    /// `(A'M_Z f1) / (A'M_Z A)`.
    pub ratio_f1: f64,
    /// `(A'M_Z f3) / (A'M_Z A)`.
    pub ratio_f3: f64,
    pub ssr_over_n: f64,
}

/// Components of the adjusted estimator's limit when the outcome depends on
/// transforms `f1(A)` and `f3(BAV)`, supplied as precomputed columns.
pub fn nonlinear_component_estimates(
    ds: &Dataset,
    treatment: &str,
    controls: &[String],
    f1_column: &str,
    f3_column: &str,
) -> Result<NonlinearComponents, EstimatorError> {
    let a = column(ds, treatment)?;
    let f1 = column(ds, f1_column)?;
    let f3 = column(ds, f3_column)?;
    let qr = controls_qr(ds, controls, false)?;
    let ra = qr.annihilate(a)?;
    let r1 = qr.annihilate(f1)?;
    let r3 = qr.annihilate(f3)?;
    let ssr = dot(&ra, &ra);
    if !(ssr >= DEGENERATE_TOLERANCE * dot(a, a)) || ssr == 0.0 {
        return Err(LinalgError::DegenerateTreatment.into());
    }
    Ok(NonlinearComponents {
        ratio_f1: dot(&ra, &r1) / ssr,
        ratio_f3: dot(&ra, &r3) / ssr,
        ssr_over_n: ssr / ds.n() as f64,
    })
}

/// The product `beta_u * Cov(A, U)` that would bring the adjusted
/// estimator's limit to zero.
pub fn required_confounding_to_nullify(estimate: f64, amp: &AmplificationEstimate) -> f64 {
    estimate * amp.ssr_over_n
}

/// `(M_Z a, M_Z y)` pairs for a partial-regression plot.
pub fn partial_regression_points(
    ds: &Dataset,
    treatment: &str,
    outcome: &str,
    controls: &[String],
) -> Result<Vec<(f64, f64)>, EstimatorError> {
    let a = column(ds, treatment)?;
    let y = column(ds, outcome)?;
    let qr = controls_qr(ds, controls, false)?;
    let ra = qr.annihilate(a)?;
    let ry = qr.annihilate(y)?;
    Ok(ra.into_iter().zip(ry).collect())
}

pub fn write_points_csv<W: Write>(points: &[(f64, f64)], w: W) -> Result<(), EstimatorError> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| EstimatorError::Csv(e.to_string());
    out.write_record(["x", "y"]).map_err(err)?;
    for &(x, y) in points {
        out.write_record([format_float(x), format_float(y)])
            .map_err(err)?;
    }
    out.flush().map_err(|e| EstimatorError::Csv(e.to_string()))
}

/// Slope of a no-intercept regression through the points.
pub fn slope_through_origin(points: &[(f64, f64)]) -> f64 {
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sem::{EdgeSpec, ErrorDistribution, NodeSpec};

    fn toy() -> Dataset {
        let a = vec![0.1, 1.3, -0.4, 2.2, 0.9, -1.1, 0.5, 1.7];
        let z = vec![1.0, 0.2, -0.3, 0.8, -0.9, 0.4, 0.0, 1.1];
        let y: Vec<f64> = a
            .iter()
            .zip(&z)
            .enumerate()
            .map(|(i, (a, z))| 0.5 * a - z + 0.1 * (i as f64).sin())
            .collect();
        let mut ds = Dataset::new(vec!["A".into(), "Z".into(), "Y".into()], vec![a, z, y]).unwrap();
        ds.set_observed("Z", false);
        ds
    }

    fn four_node() -> LinearSem {
        LinearSem::new(
            vec![
                NodeSpec::new("U", 1.0).unobserved(),
                NodeSpec::new("BAV", 1.0),
                NodeSpec::new("A", 1.0),
                NodeSpec::new("Y", 1.0),
            ],
            vec![
                EdgeSpec::new("U", "A", 0.3),
                EdgeSpec::new("BAV", "A", 0.6),
                EdgeSpec::new("A", "Y", 0.2),
                EdgeSpec::new("U", "Y", 0.3),
                EdgeSpec::new("BAV", "Y", -0.05),
            ],
            ErrorDistribution::Normal,
        )
        .unwrap()
        .solve_error_variances()
        .unwrap()
    }

    #[test]
    fn closed_form_biases_on_four_node_sem() {
        let sem = four_node();
        let naive = closed_form_bias(&sem, "A", "Y", &EstimatorSpec::naive()).unwrap();
        assert!((naive - 0.06).abs() < 1e-12);
        let adj = closed_form_bias(&sem, "A", "Y", &EstimatorSpec::adjusted(["BAV"])).unwrap();
        assert!((adj - 0.140625).abs() < 1e-12);
        let oracle =
            closed_form_bias(&sem, "A", "Y", &EstimatorSpec::oracle(["U", "BAV"])).unwrap();
        assert!(oracle.abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(EstimatorSpec::custom("x", ["A"], false)
            .validate("A", "Y")
            .is_err());
        assert!(EstimatorSpec {
            regressors: vec!["Z".into()],
            ..EstimatorSpec::naive()
        }
        .validate("A", "Y")
        .is_err());
        assert!(EstimatorSpec::adjusted(["Z", "Z"])
            .validate("A", "Y")
            .is_err());
    }

    #[test]
    fn feasibility_is_enforced() {
        let ds = toy();
        assert_eq!(
            estimate(&ds, "A", "Y", &EstimatorSpec::adjusted(["Z"])),
            Err(EstimatorError::InfeasibleEstimator("Z".into()))
        );
        assert!(estimate(&ds, "A", "Y", &EstimatorSpec::oracle(["Z"])).is_ok());
        assert_eq!(
            estimate(&ds, "A", "Q", &EstimatorSpec::naive()),
            Err(EstimatorError::UnknownColumn("Q".into()))
        );
    }

    #[test]
    fn amplification_identities() {
        let mut ds = toy();
        ds.set_observed("Z", true);
        let none = amplification_factor(&ds, "A", &[]).unwrap();
        assert_eq!(none.factor, 1.0);
        assert_eq!(none.r_squared, 0.0);
        let amp = amplification_factor(&ds, "A", &["Z".into()]).unwrap();
        assert!(amp.factor >= 1.0);
        assert!((amp.factor * amp.ssr_over_n - amp.marginal_var).abs() <= 1e-12 * amp.marginal_var);
        assert!((amp.factor - 1.0 / (1.0 - amp.r_squared)).abs() <= 1e-9 * amp.factor);
    }

    #[test]
    fn nonlinear_trivial_ratios() {
        let mut ds = toy();
        ds.set_observed("Z", true);
        let c = nonlinear_component_estimates(&ds, "A", &["Z".into()], "A", "Z").unwrap();
        assert_eq!(c.ratio_f1, 1.0);
        assert!(c.ratio_f3.abs() < 1e-9);
    }

    #[test]
    fn nullifying_confounding() {
        let amp = AmplificationEstimate {
            ssr_over_n: 0.64,
            marginal_var: 1.0,
            r_squared: 0.36,
            factor: 1.5625,
        };
        let t = required_confounding_to_nullify(0.34, &amp);
        assert!((t - 0.2176).abs() < 1e-15);
        // Removing that much confounding from the limit leaves nothing.
        assert!((0.34 - t / amp.ssr_over_n).abs() < 1e-15);
        assert_eq!(required_confounding_to_nullify(0.0, &amp), 0.0);
        let flat = AmplificationEstimate {
            ssr_over_n: 0.8,
            marginal_var: 0.8,
            r_squared: 0.0,
            factor: 1.0,
        };
        assert_eq!(
            required_confounding_to_nullify(0.5, &flat),
            0.5 * flat.marginal_var
        );
    }

    #[test]
    fn partial_points_without_controls_are_centered() {
        let ds = toy();
        let pts = partial_regression_points(&ds, "A", "Y", &[]).unwrap();
        let a = ds.column("A").unwrap();
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        for ((x, _), a) in pts.iter().zip(a) {
            assert!((x - (a - ma)).abs() < 1e-12);
        }
        let naive = estimate(&ds, "A", "Y", &EstimatorSpec::naive()).unwrap();
        assert!((slope_through_origin(&pts) - naive).abs() < 1e-12);
        let mut buf = Vec::new();
        write_points_csv(&pts[..2], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("x,y\n"));
    }
}
