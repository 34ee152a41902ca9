//! Feasible coefficient ranges and edge interventions.

use serde::{Deserialize, Serialize, Serializer};

use super::{ErrorVariance, LinearSem, SemError, Variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterventionMode {
    /// Re-solve downstream error variances so node variances keep their targets.
    #[serde(rename = "fixed")]
    FixedVariance,
    /// Keep error variances; node variances drift.
    #[serde(rename = "floating")]
    FloatingVariance,
}

impl InterventionMode {
    pub fn label(self) -> &'static str {
        match self {
            InterventionMode::FixedVariance => "fixed",
            InterventionMode::FloatingVariance => "floating",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(InterventionMode::FixedVariance),
            "floating" => Some(InterventionMode::FloatingVariance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientValues {
    Single(f64),
    /// Inclusive of `stop` when it lies on the grid.
    Sweep {
        start: f64,
        stop: f64,
        step: f64,
    },
}

impl CoefficientValues {
    pub fn values(&self) -> Result<Vec<f64>, SemError> {
        match *self {
            CoefficientValues::Single(v) if v.is_finite() => Ok(vec![v]),
            CoefficientValues::Single(v) => {
                Err(SemError::InvalidSweep(format!("non-finite value {v}")))
            }
            CoefficientValues::Sweep { start, stop, step } => {
                if !(start.is_finite() && stop.is_finite() && step.is_finite()) {
                    return Err(SemError::InvalidSweep("non-finite bound".into()));
                }
                if start == stop {
                    return Ok(vec![start]);
                }
                if step == 0.0 || (stop - start).signum() != step.signum() {
                    return Err(SemError::InvalidSweep(format!(
                        "step {step} never reaches {stop} from {start}"
                    )));
                }
                let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
                if count > 1_000_000 {
                    return Err(SemError::InvalidSweep("more than a million values".into()));
                }
                Ok((0..count).map(|i| start + i as f64 * step).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    pub edge: (String, String),
    pub values: CoefficientValues,
    pub mode: InterventionMode,
}

fn bound<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// Open interval of coefficient values keeping every downstream "auto" error
/// variance strictly positive. Infinite bounds serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibleInterval {
    pub edge: (String, String),
    pub current: f64,
    #[serde(serialize_with = "bound")]
    pub lower: f64,
    #[serde(serialize_with = "bound")]
    pub upper: f64,
    pub binding_constraints: Vec<String>,
    pub empty: bool,
}

impl FeasibleInterval {
    pub fn contains(&self, v: f64) -> bool {
        !self.empty && v > self.lower && v < self.upper
    }
}

// Relative agreement required before a node's deficit is treated as an exact quadratic.
const QUADRATIC_CHECK: f64 = 1e-9;

/// Open set `{b : c2 b^2 + c1 b + c0 > 0}` as sorted disjoint intervals.
fn positive_set(c2: f64, c1: f64, c0: f64, scale: f64) -> Vec<(f64, f64)> {
    let tiny = 1e-13 * scale;
    if c2.abs() <= tiny {
        if c1.abs() <= tiny {
            return if c0 > 0.0 {
                vec![(f64::NEG_INFINITY, f64::INFINITY)]
            } else {
                vec![]
            };
        }
        let r = -c0 / c1;
        return if c1 > 0.0 {
            vec![(r, f64::INFINITY)]
        } else {
            vec![(f64::NEG_INFINITY, r)]
        };
    }
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc <= 0.0 {
        return if c2 > 0.0 {
            vec![(f64::NEG_INFINITY, f64::INFINITY)]
        } else {
            vec![]
        };
    }
    // Numerically stable pair of roots.
    let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
    let (mut r1, mut r2) = if q == 0.0 {
        (0.0, 0.0)
    } else {
        (q / c2, c0 / q)
    };
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    if c2 > 0.0 {
        vec![(f64::NEG_INFINITY, r1), (r2, f64::INFINITY)]
    } else {
        vec![(r1, r2)]
    }
}

/// Component of `{b : f(b) > 0}` containing `b0` for a general (non-quadratic)
/// deficit, by outward search and bisection.
fn positive_component<F: Fn(f64) -> f64>(f: F, b0: f64, h: f64) -> Option<(f64, f64)> {
    if !(f(b0) > 0.0) {
        return None;
    }
    let edge = |dir: f64| -> f64 {
        let mut inside = b0;
        let mut step = h;
        loop {
            let probe = b0 + dir * step;
            if !(f(probe) > 0.0) {
                let mut outside = probe;
                for _ in 0..200 {
                    let mid = 0.5 * (inside + outside);
                    if mid == inside || mid == outside {
                        break;
                    }
                    if f(mid) > 0.0 {
                        inside = mid;
                    } else {
                        outside = mid;
                    }
                }
                return 0.5 * (inside + outside);
            }
            inside = probe;
            step *= 2.0;
            if step > 1e12 * h {
                return dir * f64::INFINITY;
            }
        }
    };
    Some((edge(-1.0), edge(1.0)))
}

pub fn feasible_interval(
    sem: &LinearSem,
    edge: (&str, &str),
) -> Result<FeasibleInterval, SemError> {
    let e = sem.edge_index(edge.0, edge.1)?;
    let b0 = sem.edges[e].coefficient;
    let to = sem.edge_ends[e].1;
    let mut affected = sem.descendants(to);
    affected.push(to);
    affected.sort_unstable();
    affected.retain(|&i| {
        let n = &sem.nodes[i];
        matches!(
            (n.variance, n.error_variance),
            (Variance::Target(_), ErrorVariance::Auto)
        )
    });

    let base: Vec<f64> = sem.edges.iter().map(|x| x.coefficient).collect();
    let deficits = |b: f64| {
        let mut c = base.clone();
        c[e] = b;
        sem.deficits_with(&c)
    };
    let h = b0.abs().max(1.0);
    let probes = [
        b0 - h,
        b0,
        b0 + h,
        b0 - 2.5 * h,
        b0 + 0.37 * h,
        b0 + 2.5 * h,
    ];
    let samples: Vec<Vec<Option<f64>>> = probes.iter().map(|&b| deficits(b)).collect();

    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    let mut empty = false;
    let mut per_node: Vec<(usize, f64, f64)> = Vec::new();
    for &i in &affected {
        let d: Vec<f64> = samples.iter().map(|s| s[i].unwrap_or(0.0)).collect();
        // Quadratic through (b0-h, b0, b0+h) in t = (b - b0)/h.
        let a0 = d[1];
        let a1 = 0.5 * (d[2] - d[0]);
        let a2 = 0.5 * (d[2] + d[0]) - d[1];
        let q = |t: f64| a2 * t * t + a1 * t + a0;
        let scale = d.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let exact = [(-2.5, d[3]), (0.37, d[4]), (2.5, d[5])]
            .iter()
            .all(|&(t, v)| (q(t) - v).abs() <= QUADRATIC_CHECK * scale);
        let component = if exact {
            // Back to b: a2 (b-b0)^2/h^2 + a1 (b-b0)/h + a0.
            let c2 = a2 / (h * h);
            let c1 = a1 / h - 2.0 * a2 * b0 / (h * h);
            let c0 = a2 * b0 * b0 / (h * h) - a1 * b0 / h + a0;
            positive_set(c2, c1, c0, scale)
                .into_iter()
                .find(|&(l, u)| b0 > l && b0 < u)
        } else {
            positive_component(|b| deficits(b)[i].unwrap_or(0.0), b0, h)
        };
        match component {
            Some((l, u)) => {
                lower = lower.max(l);
                upper = upper.min(u);
                per_node.push((i, l, u));
            }
            None => empty = true,
        }
    }

    let touches = |a: f64, b: f64| a.is_finite() && (a - b).abs() <= 1e-9 * a.abs().max(1.0);
    let binding_constraints = if empty {
        Vec::new()
    } else {
        per_node
            .iter()
            .filter(|&&(_, l, u)| touches(l, lower) || touches(u, upper))
            .map(|&(i, _, _)| sem.nodes[i].name.clone())
            .collect()
    };
    if empty {
        lower = f64::NAN;
        upper = f64::NAN;
    }
    Ok(FeasibleInterval {
        edge: (edge.0.to_string(), edge.1.to_string()),
        current: b0,
        lower,
        upper,
        binding_constraints,
        empty,
    })
}

/// Applies one coefficient change.
pub fn intervene_one(
    sem: &LinearSem,
    edge: (&str, &str),
    value: f64,
    mode: InterventionMode,
) -> Result<LinearSem, SemError> {
    let e = sem.edge_index(edge.0, edge.1)?;
    match mode {
        InterventionMode::FixedVariance => {
            let interval = feasible_interval(sem, edge)?;
            if !interval.contains(value) {
                return Err(SemError::InfeasibleIntervention {
                    value,
                    lower: interval.lower,
                    upper: interval.upper,
                });
            }
            sem.with_coefficient(e, value).solve_error_variances()
        }
        InterventionMode::FloatingVariance => {
            let resolved = sem
                .resolved
                .as_ref()
                .ok_or(SemError::UnresolvedErrorVariance)?;
            let mut out = sem.with_coefficient(e, value);
            for (node, &err) in out.nodes.iter_mut().zip(resolved) {
                node.error_variance = ErrorVariance::Fixed(err);
                node.variance = Variance::Free;
            }
            out.solve_error_variances()
        }
    }
}

/// One SEM per value of the sweep.
pub fn intervene(sem: &LinearSem, spec: &InterventionSpec) -> Result<Vec<LinearSem>, SemError> {
    let edge = (spec.edge.0.as_str(), spec.edge.1.as_str());
    spec.values
        .values()?
        .into_iter()
        .map(|v| intervene_one(sem, edge, v, spec.mode))
        .collect()
}
