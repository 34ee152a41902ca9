//! Linear structural-equation models with per-node variance budgets.
//!
//! Every closed-form quantity (implied variances, covariances, population
//! regression coefficients) comes from one covariance recursion in
//! topological order: `Cov(c, j) = sum_p b_p Cov(p, j)` and
//! `Var(c) = b' Cov(P, P) b + Var(e_c)`.

mod feasible;
mod spec;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use feasible::{
    feasible_interval, intervene, intervene_one, CoefficientValues, FeasibleInterval,
    InterventionMode, InterventionSpec,
};
pub use spec::parse_spec;

/// Relative tolerance for "implied variance equals target".
pub const VARIANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variance {
    Target(f64),
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorVariance {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Continuous,
    BinaryThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorDistribution {
    #[default]
    Normal,
    /// Uniform on `(-sqrt(3) s, sqrt(3) s)`, variance-matched to `s^2`.
    UniformRescaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub variance: Variance,
    /// Intercept of the structural equation (the mean, for exogenous nodes).
    pub mean: f64,
    pub kind: NodeKind,
    pub error_variance: ErrorVariance,
    pub observed: bool,
}

impl NodeSpec {
    /// Continuous, observed, zero-mean node whose error variance is solved for.
    pub fn new(name: impl Into<String>, variance: f64) -> Self {
        NodeSpec {
            name: name.into(),
            variance: Variance::Target(variance),
            mean: 0.0,
            kind: NodeKind::Continuous,
            error_variance: ErrorVariance::Auto,
            observed: true,
        }
    }

    pub fn unobserved(mut self) -> Self {
        self.observed = false;
        self
    }

    pub fn with_error_variance(mut self, v: f64) -> Self {
        self.error_variance = ErrorVariance::Fixed(v);
        self
    }

    pub fn free(mut self) -> Self {
        self.variance = Variance::Free;
        self
    }

    pub fn with_mean(mut self, mean: f64) -> Self {
        self.mean = mean;
        self
    }

    pub fn binary_threshold(mut self) -> Self {
        self.kind = NodeKind::BinaryThreshold;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub coefficient: f64,
}

impl EdgeSpec {
    pub fn new(from: impl Into<String>, to: impl Into<String>, coefficient: f64) -> Self {
        EdgeSpec {
            from: from.into(),
            to: to.into(),
            coefficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemError {
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("graph has a cycle through {0:?}")]
    CycleError(Vec<String>),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("self-loop on `{0}`")]
    SelfLoop(String),
    #[error("invalid node `{node}`: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("node `{node}` would need a negative error variance (deficit {deficit})")]
    InfeasibleVariance { node: String, deficit: f64 },
    #[error("node `{node}` has implied variance {implied} but target {target}")]
    InconsistentVariance {
        node: String,
        implied: f64,
        target: f64,
    },
    #[error("error variances have not been solved")]
    UnresolvedErrorVariance,
    #[error("regressor covariance matrix is singular")]
    SingularRegressorCovariance,
    #[error("no edge {0} -> {1}")]
    UnknownEdge(String, String),
    #[error("coefficient {value} is outside the feasible interval ({lower}, {upper})")]
    InfeasibleIntervention { value: f64, lower: f64, upper: f64 },
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("binary-threshold node `{0}` has children; closed forms need a linear SEM")]
    NonlinearParent(String),
}

impl SemError {
    pub fn name(&self) -> &'static str {
        match self {
            SemError::ParseError { .. } => "ParseError",
            SemError::CycleError(_) => "CycleError",
            SemError::UnknownNode(_) => "UnknownNode",
            SemError::DuplicateNode(_) => "DuplicateNode",
            SemError::DuplicateEdge(..) => "DuplicateEdge",
            SemError::SelfLoop(_) => "SelfLoop",
            SemError::InvalidNode { .. } => "InvalidNode",
            SemError::InfeasibleVariance { .. } => "InfeasibleVariance",
            SemError::InconsistentVariance { .. } => "InconsistentVariance",
            SemError::UnresolvedErrorVariance => "UnresolvedErrorVariance",
            SemError::SingularRegressorCovariance => "SingularRegressorCovariance",
            SemError::UnknownEdge(..) => "UnknownEdge",
            SemError::InfeasibleIntervention { .. } => "InfeasibleIntervention",
            SemError::InvalidSweep(_) => "InvalidSweep",
            SemError::NonlinearParent(_) => "NonlinearParent",
        }
    }
}

/// Symmetric matrix indexed by node name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Covariance {
    pub names: Vec<String>,
    /// Row-major, `names.len()` squared entries.
    pub values: Vec<f64>,
}

impl Covariance {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.at(i, j))
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let k = self.dim();
        let m = DMatrix::from_row_slice(k, k, &self.values);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// A validated DAG. Immutable; interventions return new values.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSem {
    nodes: Vec<NodeSpec>,
    edges: Vec<EdgeSpec>,
    error_distribution: ErrorDistribution,
    index: HashMap<String, usize>,
    order: Vec<usize>,
    // Incoming edge indices per node.
    incoming: Vec<Vec<usize>>,
    edge_ends: Vec<(usize, usize)>,
    resolved: Option<Vec<f64>>,
}

impl LinearSem {
    /// Validates structure. Error variances stay unresolved until
    /// [`LinearSem::solve_error_variances`].
    pub fn new(
        nodes: Vec<NodeSpec>,
        edges: Vec<EdgeSpec>,
        error_distribution: ErrorDistribution,
    ) -> Result<Self, SemError> {
        let mut index = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.name.clone(), i).is_some() {
                return Err(SemError::DuplicateNode(node.name.clone()));
            }
            validate_node(node)?;
        }
        let mut edge_ends = Vec::with_capacity(edges.len());
        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut seen = std::collections::HashSet::new();
        for (e, edge) in edges.iter().enumerate() {
            let f = *index
                .get(&edge.from)
                .ok_or_else(|| SemError::UnknownNode(edge.from.clone()))?;
            let t = *index
                .get(&edge.to)
                .ok_or_else(|| SemError::UnknownNode(edge.to.clone()))?;
            if f == t {
                return Err(SemError::SelfLoop(edge.from.clone()));
            }
            if !seen.insert((f, t)) {
                return Err(SemError::DuplicateEdge(edge.from.clone(), edge.to.clone()));
            }
            if !edge.coefficient.is_finite() {
                return Err(SemError::InvalidNode {
                    node: edge.to.clone(),
                    reason: format!("non-finite coefficient on edge from `{}`", edge.from),
                });
            }
            edge_ends.push((f, t));
            incoming[t].push(e);
        }
        let order = topological_order(&nodes, &edge_ends)?;
        Ok(LinearSem {
            nodes,
            edges,
            error_distribution,
            index,
            order,
            incoming,
            edge_ends,
            resolved: None,
        })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    pub fn error_distribution(&self) -> ErrorDistribution {
        self.error_distribution
    }

    pub fn with_error_distribution(mut self, d: ErrorDistribution) -> Self {
        self.error_distribution = d;
        self
    }

    /// Node indices in topological order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn node_index(&self, name: &str) -> Result<usize, SemError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| SemError::UnknownNode(name.to_string()))
    }

    pub fn node(&self, name: &str) -> Result<&NodeSpec, SemError> {
        Ok(&self.nodes[self.node_index(name)?])
    }

    /// `(parent index, coefficient)` for each incoming edge of node `i`.
    pub fn parents(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.incoming[i]
            .iter()
            .map(move |&e| (self.edge_ends[e].0, self.edges[e].coefficient))
    }

    pub fn edge_index(&self, from: &str, to: &str) -> Result<usize, SemError> {
        let f = self.node_index(from)?;
        let t = self.node_index(to)?;
        self.edge_ends
            .iter()
            .position(|&e| e == (f, t))
            .ok_or_else(|| SemError::UnknownEdge(from.to_string(), to.to_string()))
    }

    /// Direct coefficient, 0 when there is no edge.
    pub fn coefficient(&self, from: &str, to: &str) -> Result<f64, SemError> {
        match self.edge_index(from, to) {
            Ok(e) => Ok(self.edges[e].coefficient),
            Err(SemError::UnknownEdge(..)) => Ok(0.0),
            Err(e) => Err(e),
        }
    }

    /// Resolved error variances by node index, if solved.
    pub fn error_variances(&self) -> Option<&[f64]> {
        self.resolved.as_deref()
    }

    pub fn error_variance(&self, name: &str) -> Result<f64, SemError> {
        let i = self.node_index(name)?;
        self.resolved
            .as_ref()
            .map(|r| r[i])
            .ok_or(SemError::UnresolvedErrorVariance)
    }

    pub fn is_resolved(&self) -> bool {
        self.resolved.is_some()
    }

    /// Strict descendants of node `i`.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![i];
        while let Some(v) = stack.pop() {
            for &(f, t) in &self.edge_ends {
                if f == v && !mark[t] {
                    mark[t] = true;
                    stack.push(t);
                }
            }
        }
        (0..self.nodes.len()).filter(|&j| mark[j]).collect()
    }

    fn check_linear(&self) -> Result<(), SemError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.kind == NodeKind::BinaryThreshold && self.edge_ends.iter().any(|&(f, _)| f == i) {
                return Err(SemError::NonlinearParent(n.name.clone()));
            }
        }
        Ok(())
    }

    /// Runs the covariance recursion with the given edge coefficients, asking
    /// `error_var(node, explained)` for each node's error variance.
    fn propagate<F>(
        &self,
        coefs: &[f64],
        mut error_var: F,
    ) -> Result<(Vec<f64>, Vec<f64>), SemError>
    where
        F: FnMut(usize, f64) -> Result<f64, SemError>,
    {
        let k = self.nodes.len();
        let mut cov = vec![0.0; k * k];
        let mut err = vec![0.0; k];
        let mut done = vec![false; k];
        for &c in &self.order {
            let parents: Vec<(usize, f64)> = self.incoming[c]
                .iter()
                .map(|&e| (self.edge_ends[e].0, coefs[e]))
                .collect();
            let mut explained = 0.0;
            for &(p, bp) in &parents {
                for &(q, bq) in &parents {
                    explained += bp * bq * cov[p * k + q];
                }
            }
            for j in 0..k {
                if done[j] {
                    let v: f64 = parents.iter().map(|&(p, b)| b * cov[p * k + j]).sum();
                    cov[c * k + j] = v;
                    cov[j * k + c] = v;
                }
            }
            err[c] = error_var(c, explained)?;
            cov[c * k + c] = explained + err[c];
            done[c] = true;
        }
        Ok((cov, err))
    }

    fn current_coefs(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.coefficient).collect()
    }

    /// Sets every "auto" error variance so the node's implied variance hits
    /// its target, in topological order.
    pub fn solve_error_variances(&self) -> Result<LinearSem, SemError> {
        let coefs = self.current_coefs();
        let (_, err) = self.propagate(&coefs, |c, explained| {
            let node = &self.nodes[c];
            match (node.variance, node.error_variance) {
                (Variance::Target(t), ErrorVariance::Auto) => {
                    let e = t - explained;
                    if e < 0.0 {
                        // Round-off at an exact boundary is not a real deficit.
                        if e > -VARIANCE_TOLERANCE * t {
                            return Ok(0.0);
                        }
                        return Err(SemError::InfeasibleVariance {
                            node: node.name.clone(),
                            deficit: -e,
                        });
                    }
                    Ok(e)
                }
                (Variance::Target(t), ErrorVariance::Fixed(e)) => {
                    let implied = explained + e;
                    if (implied - t).abs() > VARIANCE_TOLERANCE * t.max(implied.abs()) {
                        return Err(SemError::InconsistentVariance {
                            node: node.name.clone(),
                            implied,
                            target: t,
                        });
                    }
                    Ok(e)
                }
                (Variance::Free, ErrorVariance::Fixed(e)) => Ok(e),
                (Variance::Free, ErrorVariance::Auto) => unreachable!("rejected at construction"),
            }
        })?;
        let mut out = self.clone();
        out.resolved = Some(err);
        Ok(out)
    }

    /// Raw `target - explained` for every auto node under alternative
    /// coefficients; negative entries mean infeasible.
    pub(crate) fn deficits_with(&self, coefs: &[f64]) -> Vec<Option<f64>> {
        let mut out = vec![None; self.nodes.len()];
        let resolved = self.resolved.clone();
        let _ = self.propagate(coefs, |c, explained| {
            let node = &self.nodes[c];
            Ok(match (node.variance, node.error_variance) {
                (Variance::Target(t), ErrorVariance::Auto) => {
                    out[c] = Some(t - explained);
                    t - explained
                }
                (_, ErrorVariance::Fixed(e)) => e,
                _ => resolved.as_ref().map_or(0.0, |r| r[c]),
            })
        });
        out
    }

    pub fn population_covariance(&self) -> Result<Covariance, SemError> {
        let err = self
            .resolved
            .as_ref()
            .ok_or(SemError::UnresolvedErrorVariance)?;
        self.check_linear()?;
        let (values, _) = self.propagate(&self.current_coefs(), |c, _| Ok(err[c]))?;
        Ok(Covariance {
            names: self.nodes.iter().map(|n| n.name.clone()).collect(),
            values,
        })
    }

    pub fn implied_variance(&self, node: &str) -> Result<f64, SemError> {
        let i = self.node_index(node)?;
        let cov = self.population_covariance()?;
        Ok(cov.at(i, i))
    }

    /// `Sigma_RR^-1 Sigma_RY`: the probability limit of the OLS slopes of
    /// `outcome` on `regressors` (with intercept).
    pub fn population_regression(
        &self,
        outcome: &str,
        regressors: &[&str],
    ) -> Result<Vec<f64>, SemError> {
        let cov = self.population_covariance()?;
        let y = self.node_index(outcome)?;
        let r: Vec<usize> = regressors
            .iter()
            .map(|n| self.node_index(n))
            .collect::<Result<_, _>>()?;
        if r.is_empty() {
            return Ok(Vec::new());
        }
        let k = r.len();
        let srr = DMatrix::from_fn(k, k, |i, j| cov.at(r[i], r[j]));
        let sry = DVector::from_fn(k, |i, _| cov.at(r[i], y));
        let scale = (0..k).map(|i| srr[(i, i)]).fold(0.0, f64::max);
        let chol = srr
            .clone()
            .cholesky()
            .ok_or(SemError::SingularRegressorCovariance)?;
        let min_pivot = (0..k)
            .map(|i| chol.l_dirty()[(i, i)].powi(2))
            .fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-12 * scale) {
            return Err(SemError::SingularRegressorCovariance);
        }
        Ok(chol.solve(&sry).iter().copied().collect())
    }

    /// Short stable fingerprint of the model, used for dataset provenance.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut text = spec::to_spec_json(self).to_string();
        if let Some(r) = &self.resolved {
            text.push_str(&format!("{r:?}"));
        }
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_spec_json(&self) -> serde_json::Value {
        spec::to_spec_json(self)
    }

    fn with_coefficient(&self, edge: usize, value: f64) -> LinearSem {
        let mut out = self.clone();
        out.edges[edge].coefficient = value;
        out.resolved = None;
        out
    }
}

fn validate_node(node: &NodeSpec) -> Result<(), SemError> {
    let bad = |reason: &str| SemError::InvalidNode {
        node: node.name.clone(),
        reason: reason.to_string(),
    };
    if node.name.is_empty() {
        return Err(bad("empty name"));
    }
    if let Variance::Target(t) = node.variance {
        if !(t > 0.0) || !t.is_finite() {
            return Err(bad("target variance must be positive"));
        }
    }
    if let ErrorVariance::Fixed(e) = node.error_variance {
        if !(e >= 0.0) || !e.is_finite() {
            return Err(bad("error variance must be nonnegative"));
        }
    }
    if node.variance == Variance::Free && node.error_variance == ErrorVariance::Auto {
        return Err(bad("variance \"free\" needs a numeric error_variance"));
    }
    if !node.mean.is_finite() {
        return Err(bad("mean must be finite"));
    }
    Ok(())
}

/// Kahn's algorithm, breaking ties by declaration order.
fn topological_order(nodes: &[NodeSpec], edges: &[(usize, usize)]) -> Result<Vec<usize>, SemError> {
    let k = nodes.len();
    let mut indeg = vec![0usize; k];
    let mut children = vec![Vec::new(); k];
    for &(f, t) in edges {
        indeg[t] += 1;
        children[f].push(t);
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..k).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(k);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() < k {
        let stuck = (0..k)
            .filter(|&i| indeg[i] > 0)
            .map(|i| nodes[i].name.clone())
            .collect();
        return Err(SemError::CycleError(stuck));
    }
    Ok(order)
}
