//! Monte Carlo replication harness and edge-intervention experiments.
//!
//! Replicate `i` of every run and every arm draws from `SeedPolicy(base_seed, i)`,
//! so arms compare on common random numbers and results do not depend on
//! thread count.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::estimators::{
    closed_form_bias, estimate, EstimatorError, EstimatorLabel, EstimatorSpec,
};
use crate::sem::{intervene_one, CoefficientValues, InterventionMode, LinearSem, SemError};
use crate::simulate::{draw_dataset, format_float, SeedPolicy, SimulateError};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        source: EstimatorError,
    },
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Sem(#[from] SemError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("replicate counts differ: {0} vs {1}")]
    MismatchedReplicates(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(String),
}

impl ExperimentError {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentError::Replicate { source, .. } => source.name(),
            ExperimentError::Simulate(e) => e.name(),
            ExperimentError::Sem(e) => e.name(),
            ExperimentError::Estimator(e) => e.name(),
            ExperimentError::MismatchedReplicates(..) => "MismatchedReplicates",
            ExperimentError::InvalidConfig(_) => "InvalidConfig",
            ExperimentError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationConfig {
    pub treatment: String,
    pub outcome: String,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub estimators: Vec<EstimatorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub label: EstimatorLabel,
    #[serde(skip)]
    pub estimates: Vec<f64>,
    pub truth: f64,
    pub reps: usize,
    pub mean: f64,
    /// Sample sd across replicates; 0 for a single replicate.
    pub sd: f64,
    pub mean_abs_bias: f64,
    /// Other label -> fraction of replicates where this estimator's absolute
    /// error is strictly larger.
    pub frac_worse_than: BTreeMap<String, f64>,
    /// Fraction whose sign differs from the truth's; zero estimates count as
    /// wrong when the truth is nonzero. Always 0 when the truth is 0.
    pub wrong_sign_frac: f64,
}

impl EstimatorReport {
    /// Monte Carlo standard error of `mean`.
    pub fn std_error(&self) -> f64 {
        self.sd / (self.reps as f64).sqrt()
    }
}

fn wrong_sign(est: f64, truth: f64) -> bool {
    truth != 0.0 && (est == 0.0 || est.signum() != truth.signum())
}

/// Builds one report per estimator from per-replicate estimates (rows are
/// replicates, columns estimators).
pub fn summarize(labels: &[EstimatorLabel], rows: &[Vec<f64>], truth: f64) -> Vec<EstimatorReport> {
    let reps = rows.len();
    let cols: Vec<Vec<f64>> = (0..labels.len())
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect();
    labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let est = &cols[j];
            let mut frac_worse_than = BTreeMap::new();
            for (k, other) in labels.iter().enumerate() {
                if k != j {
                    let worse = est
                        .iter()
                        .zip(&cols[k])
                        .filter(|(a, b)| (*a - truth).abs() > (*b - truth).abs())
                        .count();
                    frac_worse_than.insert(other.to_string(), worse as f64 / reps as f64);
                }
            }
            EstimatorReport {
                label: label.clone(),
                estimates: est.clone(),
                truth,
                reps,
                mean: stats::mean(est),
                sd: stats::sd(est),
                mean_abs_bias: est.iter().map(|e| (e - truth).abs()).sum::<f64>() / reps as f64,
                frac_worse_than,
                wrong_sign_frac: est.iter().filter(|&&e| wrong_sign(e, truth)).count() as f64
                    / reps as f64,
            }
        })
        .collect()
}

fn validate(sem: &LinearSem, cfg: &ReplicationConfig) -> Result<(), ExperimentError> {
    if cfg.reps == 0 {
        return Err(ExperimentError::InvalidConfig(
            "reps must be at least 1".into(),
        ));
    }
    if cfg.estimators.is_empty() {
        return Err(ExperimentError::InvalidConfig("no estimators".into()));
    }
    for (i, spec) in cfg.estimators.iter().enumerate() {
        spec.validate(&cfg.treatment, &cfg.outcome)?;
        if cfg.estimators[..i].iter().any(|s| s.label == spec.label) {
            return Err(ExperimentError::InvalidConfig(format!(
                "duplicate estimator label `{}`",
                spec.label
            )));
        }
        for r in &spec.regressors {
            let node = sem
                .node(r)
                .map_err(|_| EstimatorError::UnknownColumn(r.clone()))?;
            if spec.feasible_only && !node.observed {
                return Err(EstimatorError::InfeasibleEstimator(r.clone()).into());
            }
        }
    }
    for c in [&cfg.treatment, &cfg.outcome] {
        sem.node(c)
            .map_err(|_| EstimatorError::UnknownColumn(c.clone()))?;
    }
    Ok(())
}

/// Per-replicate estimates and sample treatment variances for one SEM.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub reports: Vec<EstimatorReport>,
    pub treatment_variance: Vec<f64>,
}

pub fn run_arm(
    sem: &LinearSem,
    cfg: &ReplicationConfig,
    truth: f64,
) -> Result<ArmRun, ExperimentError> {
    validate(sem, cfg)?;
    let results: Vec<Result<(Vec<f64>, f64), ExperimentError>> = (0..cfg.reps)
        .into_par_iter()
        .map(|i| {
            let ds = draw_dataset(sem, cfg.n, SeedPolicy::new(cfg.base_seed, i as u64))?;
            let est = cfg
                .estimators
                .iter()
                .map(|s| estimate(&ds, &cfg.treatment, &cfg.outcome, s))
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|source| ExperimentError::Replicate { index: i, source })?;
            let a = ds.column(&cfg.treatment).expect("validated");
            Ok((est, stats::variance(a)))
        })
        .collect();
    let mut rows = Vec::with_capacity(cfg.reps);
    let mut treatment_variance = Vec::with_capacity(cfg.reps);
    for r in results {
        let (est, v) = r?;
        rows.push(est);
        treatment_variance.push(v);
    }
    let labels: Vec<EstimatorLabel> = cfg.estimators.iter().map(|s| s.label.clone()).collect();
    Ok(ArmRun {
        reports: summarize(&labels, &rows, truth),
        treatment_variance,
    })
}

pub fn run_replications(
    sem: &LinearSem,
    cfg: &ReplicationConfig,
    truth: f64,
) -> Result<Vec<EstimatorReport>, ExperimentError> {
    Ok(run_arm(sem, cfg, truth)?.reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDifference {
    #[serde(skip)]
    pub differences: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub std_error: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub frac_positive: f64,
}

/// Distribution of `|a_i - truth| - |b_i - truth|` over paired replicates.
pub fn compare_abs_bias(
    a: &EstimatorReport,
    b: &EstimatorReport,
    truth: f64,
) -> Result<PairedDifference, ExperimentError> {
    if a.estimates.len() != b.estimates.len() {
        return Err(ExperimentError::MismatchedReplicates(
            a.estimates.len(),
            b.estimates.len(),
        ));
    }
    let d: Vec<f64> = a
        .estimates
        .iter()
        .zip(&b.estimates)
        .map(|(x, y)| (x - truth).abs() - (y - truth).abs())
        .collect();
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p| stats::quantile_sorted(&sorted, p);
    Ok(PairedDifference {
        mean: stats::mean(&d),
        sd: stats::sd(&d),
        std_error: stats::std_error(&d),
        q05: q(0.05),
        q25: q(0.25),
        median: q(0.5),
        q75: q(0.75),
        q95: q(0.95),
        frac_positive: d.iter().filter(|&&x| x > 0.0).count() as f64 / d.len() as f64,
        differences: d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Floating,
    Fixed,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Floating => "floating",
            Arm::Fixed => "fixed",
        }
    }
}

impl From<InterventionMode> for Arm {
    fn from(m: InterventionMode) -> Self {
        match m {
            InterventionMode::FixedVariance => Arm::Fixed,
            InterventionMode::FloatingVariance => Arm::Floating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreatmentVariance {
    #[serde(skip)]
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    /// Population variance of the treatment in this arm's SEM.
    pub population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterventionReport {
    pub arm: Arm,
    /// Coefficient on the intervened edge in this arm.
    pub value: f64,
    pub truth: f64,
    pub estimators: Vec<EstimatorReport>,
    /// Closed-form bias per estimator, when the SEM is linear.
    pub closed_form_bias: BTreeMap<String, f64>,
    /// Adjusted minus naive absolute error, when both are present.
    pub abs_bias_diff: Option<PairedDifference>,
    pub treatment_variance: TreatmentVariance,
}

impl InterventionReport {
    pub fn estimator(&self, label: &EstimatorLabel) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|r| &r.label == label)
    }
}

fn arm_report(
    arm: Arm,
    sem: &LinearSem,
    edge: (&str, &str),
    truth_edge: (&str, &str),
    cfg: &ReplicationConfig,
) -> Result<InterventionReport, ExperimentError> {
    let truth = sem.coefficient(truth_edge.0, truth_edge.1)?;
    let run = run_arm(sem, cfg, truth)?;
    let find = |l: EstimatorLabel| run.reports.iter().find(|r| r.label == l);
    let abs_bias_diff = match (find(EstimatorLabel::Adjusted), find(EstimatorLabel::Naive)) {
        (Some(a), Some(b)) => Some(compare_abs_bias(a, b, truth)?),
        _ => None,
    };
    let closed_form_bias = cfg
        .estimators
        .iter()
        .filter_map(|s| {
            closed_form_bias(sem, &cfg.treatment, &cfg.outcome, s)
                .ok()
                .map(|b| (s.label.to_string(), b))
        })
        .collect();
    Ok(InterventionReport {
        arm,
        value: sem.coefficient(edge.0, edge.1)?,
        truth,
        closed_form_bias,
        abs_bias_diff,
        treatment_variance: TreatmentVariance {
            mean: stats::mean(&run.treatment_variance),
            std_error: stats::std_error(&run.treatment_variance),
            population: sem.implied_variance(&cfg.treatment).ok(),
            values: run.treatment_variance,
        },
        estimators: run.reports,
    })
}

/// Baseline arm, then one arm per (value, mode). All fixed-variance values
/// are checked for feasibility before anything runs. The truth of each arm is
/// the coefficient on `truth_edge` in that arm's SEM.
pub fn intervention_experiment(
    sem: &LinearSem,
    edge: (&str, &str),
    values: &CoefficientValues,
    modes: &[InterventionMode],
    cfg: &ReplicationConfig,
    truth_edge: (&str, &str),
) -> Result<Vec<InterventionReport>, ExperimentError> {
    sem.edge_index(edge.0, edge.1)?;
    sem.edge_index(truth_edge.0, truth_edge.1)?;
    let values = values.values()?;
    let mut arms = Vec::new();
    for &v in &values {
        for &m in modes {
            arms.push((Arm::from(m), intervene_one(sem, edge, v, m)?));
        }
    }
    let mut out = vec![arm_report(Arm::Baseline, sem, edge, truth_edge, cfg)?];
    for (arm, s) in &arms {
        out.push(arm_report(*arm, s, edge, truth_edge, cfg)?);
    }
    Ok(out)
}

fn io_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(e.to_string())
}

/// One row per replicate, one column per estimator.
pub fn write_estimates_csv<W: Write>(
    reports: &[EstimatorReport],
    w: W,
) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["replicate".to_string()];
    header.extend(reports.iter().map(|r| r.label.to_string()));
    out.write_record(&header).map_err(io_err)?;
    let reps = reports.first().map_or(0, |r| r.estimates.len());
    for i in 0..reps {
        let mut row = vec![i.to_string()];
        row.extend(reports.iter().map(|r| format_float(r.estimates[i])));
        out.write_record(&row).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Long format: `arm,value,replicate,<estimator...>,treatment_variance`.
pub fn write_intervention_csv<W: Write>(
    reports: &[InterventionReport],
    w: W,
) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["arm", "value", "replicate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if let Some(first) = reports.first() {
        header.extend(first.estimators.iter().map(|r| r.label.to_string()));
    }
    header.push("treatment_variance".into());
    out.write_record(&header).map_err(io_err)?;
    for rep in reports {
        for i in 0..rep.treatment_variance.values.len() {
            let mut row = vec![
                rep.arm.label().to_string(),
                format_float(rep.value),
                i.to_string(),
            ];
            row.extend(rep.estimators.iter().map(|r| format_float(r.estimates[i])));
            row.push(format_float(rep.treatment_variance.values[i]));
            out.write_record(&row).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}
