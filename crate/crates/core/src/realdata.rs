//! Latent-probit bootstrap pipeline: inject controlled unmeasured confounding
//! and bias-amplifying covariates into RCT-shaped data.
//!
//! Per bootstrap replicate: resample rows, draw a latent index consistent with
//! the observed binary treatment, draw `(U, BAV)` from their conditional normal
//! given the latent, build `X~ = X / s + BAV` and a modified outcome, then run
//! the naive, adjusted and oracle regressions.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{estimate, EstimatorError, EstimatorLabel, EstimatorSpec};
use crate::experiment::{compare_abs_bias, summarize, EstimatorReport, PairedDifference};
use crate::linalg::{ols_fit, LinalgError, Matrix, Qr};
use crate::sem::InterventionMode;
use crate::simulate::{
    format_float, latent_threshold_intercept, Dataset, SeedPolicy, SimulateError,
};
use crate::stats::{self, normal_quantile};

/// Smallest eigenvalue tolerated in a conditional covariance.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RealDataError {
    #[error("{what} = {value} is out of range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("conditioning block is singular")]
    SingularBlock,
    #[error("conditional covariance is not positive semi-definite (eigenvalue {0})")]
    NotPSD(f64),
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
    #[error("treatment must be 0/1, found {0} at row {1}")]
    NonBinaryTreatment(f64, usize),
    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        source: EstimatorError,
    },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("config: {0}")]
    Parse(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl RealDataError {
    pub fn name(&self) -> &'static str {
        match self {
            RealDataError::OutOfRange { .. } => "OutOfRange",
            RealDataError::DimensionMismatch { .. } => "DimensionMismatch",
            RealDataError::SingularBlock => "SingularBlock",
            RealDataError::NotPSD(_) => "NotPSD",
            RealDataError::InfeasibleConfig(_) => "InfeasibleConfig",
            RealDataError::NonBinaryTreatment(..) => "NonBinaryTreatment",
            RealDataError::Replicate { source, .. } => source.name(),
            RealDataError::Estimator(e) => e.name(),
            RealDataError::Linalg(e) => e.name(),
            RealDataError::Simulate(e) => e.name(),
            RealDataError::Parse(_) => "ParseError",
            RealDataError::Csv(_) => "CsvError",
        }
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), RealDataError> {
    if expected != found {
        return Err(RealDataError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Outcome, binary treatment and covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RctDataset {
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl RctDataset {
    pub fn new(y: Vec<f64>, a: Vec<f64>, x: Vec<Vec<f64>>) -> Result<Self, RealDataError> {
        check_len(y.len(), a.len())?;
        for c in &x {
            check_len(y.len(), c.len())?;
        }
        if let Some(i) = a.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(RealDataError::NonBinaryTreatment(a[i], i));
        }
        if y.len() < 3 {
            return Err(SimulateError::NTooSmall(y.len()).into());
        }
        Ok(RctDataset { y, a, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.len()
    }

    pub fn treated_share(&self) -> f64 {
        stats::mean(&self.a)
    }

    /// Columns `y, a, x1..xk`.
    pub fn to_dataset(&self) -> Dataset {
        let mut names = vec!["y".to_string(), "a".to_string()];
        let mut cols = vec![self.y.clone(), self.a.clone()];
        for (j, c) in self.x.iter().enumerate() {
            names.push(format!("x{}", j + 1));
            cols.push(c.clone());
        }
        Dataset::new(names, cols).expect("validated at construction")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RealDataError> {
        Ok(self.to_dataset().write_csv(w)?)
    }

    /// Reads a CSV with columns `y`, `a`, then covariates in file order.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, RealDataError> {
        let ds = Dataset::read_csv(r)?;
        let col = |n: &str| {
            ds.column(n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| RealDataError::Csv(format!("missing column `{n}`")))
        };
        let x = ds
            .names()
            .iter()
            .filter(|n| *n != "y" && *n != "a")
            .map(|n| ds.column(n).unwrap().to_vec())
            .collect();
        Self::new(col("y")?, col("a")?, x)
    }

    fn resample(&self, idx: &[usize]) -> RctDataset {
        RctDataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            x: self
                .x
                .iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    /// Full-sample regression `y ~ 1 + a + x`: `(itt, beta_x)`.
    pub fn conditional_itt(&self) -> Result<(f64, Vec<f64>), RealDataError> {
        let mut cols: Vec<&[f64]> = vec![&self.a];
        cols.extend(self.x.iter().map(Vec::as_slice));
        let fit = ols_fit(&Matrix::with_intercept(self.n(), &cols)?, &self.y)?;
        Ok((fit.coefficients[1], fit.coefficients[2..].to_vec()))
    }
}

/// Parameters of the stand-in for the clinical trial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateRct {
    pub n: usize,
    pub p_a: f64,
    pub itt_effect: f64,
    /// Per standardized covariate.
    pub covariate_outcome_coefs: Vec<f64>,
    /// Sample variance of the generated outcome.
    pub outcome_variance: f64,
}

impl Default for SurrogateRct {
    /// Matched to the trial's regression table: 294 children, 51% treated,
    /// conditional ITT 0.137 with standard error about 0.053, three weak
    /// covariates.
    fn default() -> Self {
        SurrogateRct {
            n: 294,
            p_a: 0.51,
            itt_effect: 0.137,
            covariate_outcome_coefs: vec![-0.036, 0.042, 0.035],
            outcome_variance: 0.2156,
        }
    }
}

/// `round(p_a n)` treated units in random order, `X` standard normal made
/// orthogonal to `[1, A]` and scaled to sample variance 1, `Y = itt A + X c + e` with `e` orthogonal to `[1, A, X]` and
/// scaled so that the sample variance of `Y` is `outcome_variance`. The
/// full-sample regression of `Y` on `A` and `X` then returns `itt` and `c`
/// exactly.
pub fn generate_surrogate_rct(spec: &SurrogateRct, seed: u64) -> Result<RctDataset, RealDataError> {
    if !(spec.p_a > 0.0 && spec.p_a < 1.0) {
        return Err(RealDataError::OutOfRange {
            what: "p_a",
            value: spec.p_a,
        });
    }
    let n = spec.n;
    let k = spec.covariate_outcome_coefs.len();
    if n < k + 3 {
        return Err(SimulateError::NTooSmall(n).into());
    }
    let treated = (spec.p_a * n as f64).round() as usize;
    if treated == 0 || treated == n {
        return Err(RealDataError::OutOfRange {
            what: "treated share",
            value: treated as f64 / n as f64,
        });
    }
    let mut rng = SeedPolicy::new(seed, 0).rng();
    let mut a: Vec<f64> = (0..n)
        .map(|i| if i < treated { 1.0 } else { 0.0 })
        .collect();
    a.shuffle(&mut rng);
    let arm_design = Qr::new(&Matrix::with_intercept(n, &[&a])?)?;
    let x: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let c: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let c = arm_design.annihilate(&c)?;
            let s = stats::sd(&c);
            Ok(c.iter().map(|v| v / s).collect())
        })
        .collect::<Result<_, RealDataError>>()?;
    let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();

    let signal: Vec<f64> = (0..n)
        .map(|i| {
            spec.itt_effect * a[i]
                + x.iter()
                    .zip(&spec.covariate_outcome_coefs)
                    .map(|(c, b)| b * c[i])
                    .sum::<f64>()
        })
        .collect();
    let noise_var = spec.outcome_variance - stats::variance(&signal);
    if !(noise_var > 0.0) {
        return Err(RealDataError::OutOfRange {
            what: "outcome_variance",
            value: spec.outcome_variance,
        });
    }
    let mut cols: Vec<&[f64]> = vec![&a];
    cols.extend(x.iter().map(Vec::as_slice));
    let e = Qr::new(&Matrix::with_intercept(n, &cols)?)?.annihilate(&raw)?;
    let scale = (noise_var / stats::variance(&e)).sqrt();
    let y = signal.iter().zip(&e).map(|(s, e)| s + scale * e).collect();
    RctDataset::new(y, a, x)
}

fn check_p(p_a: f64) -> Result<(), RealDataError> {
    if !(p_a > 0.0 && p_a < 1.0) {
        return Err(RealDataError::OutOfRange {
            what: "p_a",
            value: p_a,
        });
    }
    Ok(())
}

/// Unit-variance latent index consistent with `a`, from uniforms in (0, 1):
/// treated rows get `Phi^-1(p X + 1 - p) + alpha`, untreated rows
/// `Phi^-1((1 - p) X) + alpha`, with `alpha = -Phi^-1(1 - p)`.
pub fn recover_latent_from_uniforms(
    a: &[f64],
    p_a: f64,
    uniforms: &[f64],
) -> Result<Vec<f64>, RealDataError> {
    check_p(p_a)?;
    check_len(a.len(), uniforms.len())?;
    let alpha = latent_threshold_intercept(p_a)?;
    a.iter()
        .zip(uniforms)
        .enumerate()
        .map(|(i, (&ai, &u))| {
            if !(u > 0.0 && u < 1.0) {
                return Err(RealDataError::OutOfRange {
                    what: "uniform draw",
                    value: u,
                });
            }
            if ai == 1.0 {
                let v = normal_quantile(p_a * u + (1.0 - p_a)) + alpha;
                // Rounding can land exactly on the threshold for u near 0.
                Ok(if v > 0.0 { v } else { f64::MIN_POSITIVE })
            } else if ai == 0.0 {
                Ok((normal_quantile((1.0 - p_a) * u) + alpha).min(0.0))
            } else {
                Err(RealDataError::NonBinaryTreatment(ai, i))
            }
        })
        .collect()
}

pub fn recover_latent(a: &[f64], p_a: f64, seed: SeedPolicy) -> Result<Vec<f64>, RealDataError> {
    let mut rng = seed.rng();
    let u: Vec<f64> = (0..a.len()).map(|_| rng.sample(Open01)).collect();
    recover_latent_from_uniforms(a, p_a, &u)
}

/// Parameters of the latent-probit simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbitPipelineConfig {
    pub gamma_u: f64,
    pub gamma_x_tilde: Vec<f64>,
    pub beta_u: f64,
    pub beta_x_tilde: Vec<f64>,
    pub beta_a_truth: f64,
    /// Share of each modified covariate's variance carried by the original covariate.
    pub covariate_carry_share: f64,
    pub reps: usize,
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_a_override: Option<f64>,
}

impl ProbitPipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, RealDataError> {
        serde_json::from_str(text).map_err(|e| {
            RealDataError::Parse(format!("line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    /// Variance of each BAV column.
    pub fn bav_variance(&self) -> f64 {
        1.0 - self.covariate_carry_share
    }

    /// Latent variance explained by `U` and the BAVs.
    pub fn explained_latent_variance(&self) -> f64 {
        self.gamma_u * self.gamma_u
            + self.bav_variance() * self.gamma_x_tilde.iter().map(|g| g * g).sum::<f64>()
    }

    pub fn validate(&self, k: usize) -> Result<(), RealDataError> {
        check_len(k, self.gamma_x_tilde.len())?;
        check_len(k, self.beta_x_tilde.len())?;
        if !(self.covariate_carry_share > 0.0 && self.covariate_carry_share <= 1.0) {
            return Err(RealDataError::OutOfRange {
                what: "covariate_carry_share",
                value: self.covariate_carry_share,
            });
        }
        if self.reps == 0 {
            return Err(RealDataError::OutOfRange {
                what: "reps",
                value: 0.0,
            });
        }
        if let Some(p) = self.p_a_override {
            check_p(p)?;
        }
        let explained = self.explained_latent_variance();
        if !(explained < 1.0) {
            return Err(RealDataError::InfeasibleConfig(format!(
                "U and BAV explain {explained} of a unit latent variance"
            )));
        }
        Ok(())
    }
}

/// Joint normal model of `(U, BAV_1..k)` and `(A*, X_1..k)`, where only the
/// latent index is correlated with the confounders.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderModel {
    pub gamma_u: f64,
    pub gamma_x: Vec<f64>,
    pub u_variance: f64,
    pub bav_variance: Vec<f64>,
    pub latent_mean: f64,
    pub latent_variance: f64,
    pub x_variance: Vec<f64>,
}

impl ConfounderModel {
    pub fn from_config(
        config: &ProbitPipelineConfig,
        latent_mean: f64,
        latent_variance: f64,
    ) -> Self {
        let k = config.gamma_x_tilde.len();
        ConfounderModel {
            gamma_u: config.gamma_u,
            gamma_x: config.gamma_x_tilde.clone(),
            u_variance: 1.0,
            bav_variance: vec![config.bav_variance(); k],
            latent_mean,
            latent_variance,
            x_variance: vec![1.0; k],
        }
    }
}

/// Precomputed conditional distribution: mean map `K` and a square root of
/// the Schur complement.
#[derive(Debug, Clone)]
pub struct ConditionalNormal {
    gain: DMatrix<f64>,
    root: DMatrix<f64>,
    latent_mean: f64,
}

impl ConditionalNormal {
    pub fn new(model: &ConfounderModel) -> Result<Self, RealDataError> {
        let k = model.gamma_x.len();
        check_len(k, model.bav_variance.len())?;
        check_len(k, model.x_variance.len())?;
        let d = k + 1;
        let mut s11 = DMatrix::zeros(d, d);
        let mut s12 = DMatrix::zeros(d, d);
        let mut s22 = DMatrix::zeros(d, d);
        s11[(0, 0)] = model.u_variance;
        s12[(0, 0)] = model.gamma_u * model.u_variance;
        s22[(0, 0)] = model.latent_variance;
        for j in 0..k {
            s11[(j + 1, j + 1)] = model.bav_variance[j];
            s12[(j + 1, 0)] = model.gamma_x[j] * model.bav_variance[j];
            s22[(j + 1, j + 1)] = model.x_variance[j];
        }
        let scale = s22.diagonal().amax();
        let chol = s22.clone().cholesky().ok_or(RealDataError::SingularBlock)?;
        if (0..d).any(|i| chol.l_dirty()[(i, i)].powi(2) <= 1e-12 * scale) {
            return Err(RealDataError::SingularBlock);
        }
        let inv = chol.inverse();
        let gain = &s12 * &inv;
        let mut schur = &s11 - &gain * s12.transpose();
        schur = 0.5 * (&schur + schur.transpose());
        let eig = SymmetricEigen::new(schur.clone());
        let min = eig.eigenvalues.min();
        if min < -PSD_TOLERANCE {
            return Err(RealDataError::NotPSD(min));
        }
        let root = match schur.clone().cholesky() {
            Some(c) => c.unpack(),
            None => {
                let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
                &eig.eigenvectors * sq
            }
        };
        Ok(ConditionalNormal {
            gain,
            root,
            latent_mean: model.latent_mean,
        })
    }

    /// One row's `(U, BAV...)` given its latent index, covariates and `d`
    /// standard normal draws.
    fn draw_row(&self, a_star: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        let d = self.gain.nrows();
        let mut w = DVector::zeros(d);
        w[0] = a_star - self.latent_mean;
        for (j, &v) in x.iter().enumerate() {
            w[j + 1] = v;
        }
        let mu = &self.gain * w;
        for i in 0..d {
            let mut s = mu[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                s += self.root[(i, j)] * zj;
            }
            for (j, zj) in z.iter().enumerate().skip(i + 1) {
                s += self.root[(i, j)] * zj;
            }
            out[i] = s;
        }
    }
}

/// Draws `(U, BAV)` row by row from their normal distribution conditional on
/// `(A*, X)`.
pub fn conditional_confounder_draw(
    a_star: &[f64],
    x: &[Vec<f64>],
    model: &ConfounderModel,
    seed: SeedPolicy,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), RealDataError> {
    let mut rng = seed.rng();
    let d = model.gamma_x.len() + 1;
    let z: Vec<f64> = (0..a_star.len() * d)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    conditional_confounder_from_normals(a_star, x, model, &z)
}

/// As [`conditional_confounder_draw`] with caller-supplied standard normals,
/// `1 + k` per row.
pub fn conditional_confounder_from_normals(
    a_star: &[f64],
    x: &[Vec<f64>],
    model: &ConfounderModel,
    z: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>), RealDataError> {
    let n = a_star.len();
    let k = model.gamma_x.len();
    check_len(k, x.len())?;
    for c in x {
        check_len(n, c.len())?;
    }
    check_len(n * (k + 1), z.len())?;
    let cond = ConditionalNormal::new(model)?;
    let mut u = vec![0.0; n];
    let mut bav = vec![vec![0.0; n]; k];
    let mut xi = vec![0.0; k];
    let mut out = vec![0.0; k + 1];
    for i in 0..n {
        for j in 0..k {
            xi[j] = x[j][i];
        }
        cond.draw_row(a_star[i], &xi, &z[i * (k + 1)..(i + 1) * (k + 1)], &mut out);
        u[i] = out[0];
        for j in 0..k {
            bav[j][i] = out[j + 1];
        }
    }
    Ok((u, bav))
}

/// Population `Cov(A, U)` and `Cov(A, BAV_j)` for a binary treatment
/// thresholding a normal latent of the given variance.
pub fn binary_cov_closed_form(
    config: &ProbitPipelineConfig,
    latent_variance: f64,
    p_a: f64,
) -> Result<(f64, Vec<f64>), RealDataError> {
    if !(latent_variance > 0.0) {
        return Err(RealDataError::OutOfRange {
            what: "latent_variance",
            value: latent_variance,
        });
    }
    check_p(p_a)?;
    let alpha = latent_variance.sqrt() * latent_threshold_intercept(p_a)?;
    let factor = (-alpha * alpha / (2.0 * latent_variance)).exp()
        / (2.0 * std::f64::consts::PI * latent_variance).sqrt();
    let bav = config.bav_variance();
    Ok((
        config.gamma_u * factor,
        config
            .gamma_x_tilde
            .iter()
            .map(|g| g * bav * factor)
            .collect(),
    ))
}

/// `X~_j = X_j / s_j + BAV_j` with `s_j` making `Var(X_j / s_j) = carry_share`.
pub fn modify_covariates(
    x: &[Vec<f64>],
    bav: &[Vec<f64>],
    carry_share: f64,
) -> Result<Vec<Vec<f64>>, RealDataError> {
    check_len(x.len(), bav.len())?;
    if !(carry_share > 0.0 && carry_share <= 1.0) {
        return Err(RealDataError::OutOfRange {
            what: "carry_share",
            value: carry_share,
        });
    }
    x.iter()
        .zip(bav)
        .map(|(xc, bc)| {
            check_len(xc.len(), bc.len())?;
            let var = stats::variance(xc);
            if !(var > 0.0) {
                return Err(RealDataError::OutOfRange {
                    what: "covariate variance",
                    value: var,
                });
            }
            let s = (var / carry_share).sqrt();
            Ok(xc.iter().zip(bc).map(|(xv, bv)| xv / s + bv).collect())
        })
        .collect()
}

/// `Y~ = Y + U beta_u + BAV beta_x + X~ (beta_x~ - beta_x)`.
pub fn modify_outcome(
    y: &[f64],
    a: &[f64],
    u: &[f64],
    bav: &[Vec<f64>],
    x_tilde: &[Vec<f64>],
    original_beta_x: &[f64],
    config: &ProbitPipelineConfig,
) -> Result<Vec<f64>, RealDataError> {
    let n = y.len();
    let k = original_beta_x.len();
    check_len(n, a.len())?;
    check_len(n, u.len())?;
    check_len(k, bav.len())?;
    check_len(k, x_tilde.len())?;
    check_len(k, config.beta_x_tilde.len())?;
    for c in bav.iter().chain(x_tilde) {
        check_len(n, c.len())?;
    }
    Ok((0..n)
        .map(|i| {
            let mut v = y[i] + config.beta_u * u[i];
            for j in 0..k {
                v += bav[j][i] * original_beta_x[j]
                    + x_tilde[j][i] * (config.beta_x_tilde[j] - original_beta_x[j]);
            }
            v
        })
        .collect())
}

/// Change to one `gamma_x~` entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineIntervention {
    pub index: usize,
    pub value: f64,
    pub modes: Vec<InterventionMode>,
}

/// Replicate mean of a sample covariance against its closed form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceCheck {
    pub empirical: f64,
    pub std_error: f64,
    pub closed_form: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineArm {
    /// `control`, `fixed` or `floating`.
    pub arm: String,
    pub gamma_x_tilde: Vec<f64>,
    pub latent_variance: f64,
    pub estimators: Vec<EstimatorReport>,
    pub abs_bias_diff: PairedDifference,
    pub cov_au: CovarianceCheck,
    /// Against `X~`; the closed form covers only its BAV part.
    pub cov_ax: Vec<CovarianceCheck>,
}

impl PipelineArm {
    pub fn estimator(&self, label: &EstimatorLabel) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|r| &r.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub n: usize,
    pub reps: usize,
    pub p_a: f64,
    pub latent_intercept: f64,
    pub itt: f64,
    pub beta_x: Vec<f64>,
    pub arms: Vec<PipelineArm>,
}

impl PipelineReport {
    pub fn arm(&self, label: &str) -> Option<&PipelineArm> {
        self.arms.iter().find(|a| a.arm == label)
    }
}

struct ArmPlan {
    label: String,
    config: ProbitPipelineConfig,
    latent_sd: f64,
}

struct ArmDraw {
    estimates: Vec<f64>,
    cov_au: f64,
    cov_ax: Vec<f64>,
}

const X_TILDE: &str = "x_tilde";

fn labels() -> Vec<EstimatorLabel> {
    vec![
        EstimatorLabel::Naive,
        EstimatorLabel::Adjusted,
        EstimatorLabel::Oracle,
    ]
}

/// Runs the bootstrap for the configuration itself (arm `control`) plus any
/// intervention arms. Every arm of replicate `r` reuses the same resample,
/// uniforms and normal draws.
pub fn bootstrap_pipeline(
    rct: &RctDataset,
    config: &ProbitPipelineConfig,
    intervention: Option<&PipelineIntervention>,
) -> Result<PipelineReport, RealDataError> {
    let k = rct.k();
    config.validate(k)?;
    let p_a = config.p_a_override.unwrap_or_else(|| rct.treated_share());
    check_p(p_a)?;
    let alpha = latent_threshold_intercept(p_a)?;
    let (itt, beta_x) = rct.conditional_itt()?;

    let mut plans = vec![ArmPlan {
        label: "control".into(),
        config: config.clone(),
        latent_sd: 1.0,
    }];
    if let Some(iv) = intervention {
        if iv.index >= k {
            return Err(RealDataError::OutOfRange {
                what: "intervention index",
                value: iv.index as f64,
            });
        }
        let mut changed = config.clone();
        changed.gamma_x_tilde[iv.index] = iv.value;
        for &mode in &iv.modes {
            let latent_var = match mode {
                InterventionMode::FixedVariance => {
                    changed.validate(k)?;
                    1.0
                }
                InterventionMode::FloatingVariance => {
                    let old = config.gamma_x_tilde[iv.index];
                    1.0 + (iv.value * iv.value - old * old) * config.bav_variance()
                }
            };
            if !(latent_var > 0.0) {
                return Err(RealDataError::InfeasibleConfig(format!(
                    "latent variance {latent_var}"
                )));
            }
            plans.push(ArmPlan {
                label: mode.label().into(),
                config: changed.clone(),
                latent_sd: latent_var.sqrt(),
            });
        }
    }
    let conds = plans
        .iter()
        .map(|p| {
            let model = ConfounderModel::from_config(
                &p.config,
                p.latent_sd * alpha,
                p.latent_sd * p.latent_sd,
            );
            ConditionalNormal::new(&model)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = rct.n();
    let specs = {
        let xs: Vec<String> = (1..=k).map(|j| format!("{X_TILDE}{j}")).collect();
        let mut oracle = xs.clone();
        oracle.push("u".into());
        vec![
            EstimatorSpec::naive(),
            EstimatorSpec::adjusted(xs),
            EstimatorSpec::oracle(oracle),
        ]
    };

    let per_rep: Vec<Result<Vec<ArmDraw>, RealDataError>> = (0..config.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = SeedPolicy::new(config.base_seed, r as u64).rng();
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let boot = rct.resample(&idx);
            let uniforms: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
            let z: Vec<f64> = (0..n * (k + 1))
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let unit_latent = recover_latent_from_uniforms(&boot.a, p_a, &uniforms)?;

            plans
                .iter()
                .zip(&conds)
                .map(|(plan, cond)| {
                    let a_star: Vec<f64> = unit_latent.iter().map(|v| v * plan.latent_sd).collect();
                    let mut u = vec![0.0; n];
                    let mut bav = vec![vec![0.0; n]; k];
                    let mut xi = vec![0.0; k];
                    let mut out = vec![0.0; k + 1];
                    for i in 0..n {
                        for j in 0..k {
                            xi[j] = boot.x[j][i];
                        }
                        cond.draw_row(a_star[i], &xi, &z[i * (k + 1)..(i + 1) * (k + 1)], &mut out);
                        u[i] = out[0];
                        for j in 0..k {
                            bav[j][i] = out[j + 1];
                        }
                    }
                    let x_tilde =
                        modify_covariates(&boot.x, &bav, plan.config.covariate_carry_share)?;
                    let y_tilde = modify_outcome(
                        &boot.y,
                        &boot.a,
                        &u,
                        &bav,
                        &x_tilde,
                        &beta_x,
                        &plan.config,
                    )?;

                    let mut names = vec!["y".to_string(), "a".to_string(), "u".to_string()];
                    let mut cols = vec![y_tilde, boot.a.clone(), u];
                    for (j, c) in x_tilde.into_iter().enumerate() {
                        names.push(format!("{X_TILDE}{}", j + 1));
                        cols.push(c);
                    }
                    let mut observed = vec![true; names.len()];
                    observed[2] = false;
                    let ds = Dataset::with_observed(names, cols, observed)?;
                    let estimates = specs
                        .iter()
                        .map(|s| estimate(&ds, "a", "y", s))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|source| RealDataError::Replicate { index: r, source })?;
                    let a = ds.column("a").unwrap();
                    Ok(ArmDraw {
                        estimates,
                        cov_au: stats::covariance(a, ds.column("u").unwrap()),
                        cov_ax: (1..=k)
                            .map(|j| {
                                stats::covariance(a, ds.column(&format!("{X_TILDE}{j}")).unwrap())
                            })
                            .collect(),
                    })
                })
                .collect()
        })
        .collect();

    let mut draws: Vec<Vec<ArmDraw>> = Vec::with_capacity(config.reps);
    for d in per_rep {
        draws.push(d?);
    }

    let arms = plans
        .iter()
        .enumerate()
        .map(|(p, plan)| {
            let rows: Vec<Vec<f64>> = draws.iter().map(|d| d[p].estimates.clone()).collect();
            let estimators = summarize(&labels(), &rows, config.beta_a_truth);
            let abs_bias_diff =
                compare_abs_bias(&estimators[1], &estimators[0], config.beta_a_truth)
                    .expect("equal replicate counts");
            let latent_var = plan.latent_sd * plan.latent_sd;
            let (cf_au, cf_ax) = binary_cov_closed_form(&plan.config, latent_var, p_a)?;
            let check = |vals: Vec<f64>, closed_form: f64| CovarianceCheck {
                empirical: stats::mean(&vals),
                std_error: stats::std_error(&vals),
                closed_form,
            };
            Ok(PipelineArm {
                arm: plan.label.clone(),
                gamma_x_tilde: plan.config.gamma_x_tilde.clone(),
                latent_variance: latent_var,
                estimators,
                abs_bias_diff,
                cov_au: check(draws.iter().map(|d| d[p].cov_au).collect(), cf_au),
                cov_ax: (0..k)
                    .map(|j| check(draws.iter().map(|d| d[p].cov_ax[j]).collect(), cf_ax[j]))
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, RealDataError>>()?;

    Ok(PipelineReport {
        n,
        reps: config.reps,
        p_a,
        latent_intercept: alpha,
        itt,
        beta_x,
        arms,
    })
}

/// Long format: `arm,replicate,naive,adjusted,oracle`.
pub fn write_pipeline_csv<W: Write>(report: &PipelineReport, w: W) -> Result<(), RealDataError> {
    let err = |e: csv::Error| RealDataError::Csv(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["arm".to_string(), "replicate".to_string()];
    if let Some(first) = report.arms.first() {
        header.extend(first.estimators.iter().map(|r| r.label.to_string()));
    }
    out.write_record(&header).map_err(err)?;
    for arm in &report.arms {
        for i in 0..report.reps {
            let mut row = vec![arm.arm.clone(), i.to_string()];
            row.extend(arm.estimators.iter().map(|r| format_float(r.estimates[i])));
            out.write_record(&row).map_err(err)?;
        }
    }
    out.flush().map_err(|e| RealDataError::Csv(e.to_string()))
}
