//! JSON spec documents: `{"nodes": [...], "edges": [...]}`.

use serde::de::{self, Deserializer};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    EdgeSpec, ErrorDistribution, ErrorVariance, LinearSem, NodeKind, NodeSpec, SemError, Variance,
};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    nodes: Vec<RawNode>,
    #[serde(default)]
    edges: Vec<RawEdge>,
    #[serde(default)]
    error_distribution: ErrorDistribution,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: String,
    #[serde(deserialize_with = "variance_field")]
    variance: Variance,
    #[serde(default)]
    mean: f64,
    #[serde(default = "auto", deserialize_with = "error_variance_field")]
    error_variance: ErrorVariance,
    #[serde(default = "continuous")]
    kind: NodeKind,
    #[serde(default = "yes")]
    observed: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: String,
    to: String,
    coef: f64,
}

fn auto() -> ErrorVariance {
    ErrorVariance::Auto
}

fn continuous() -> NodeKind {
    NodeKind::Continuous
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumberOrWord {
    Number(f64),
    Word(String),
}

fn variance_field<'de, D: Deserializer<'de>>(d: D) -> Result<Variance, D::Error> {
    match NumberOrWord::deserialize(d)? {
        NumberOrWord::Number(v) => Ok(Variance::Target(v)),
        NumberOrWord::Word(w) if w == "free" => Ok(Variance::Free),
        NumberOrWord::Word(w) => Err(de::Error::custom(format!(
            "variance must be a number or \"free\", got \"{w}\""
        ))),
    }
}

fn error_variance_field<'de, D: Deserializer<'de>>(d: D) -> Result<ErrorVariance, D::Error> {
    match NumberOrWord::deserialize(d)? {
        NumberOrWord::Number(v) => Ok(ErrorVariance::Fixed(v)),
        NumberOrWord::Word(w) if w == "auto" => Ok(ErrorVariance::Auto),
        NumberOrWord::Word(w) => Err(de::Error::custom(format!(
            "error_variance must be a number or \"auto\", got \"{w}\""
        ))),
    }
}

/// Parses, validates and solves a spec document.
pub fn parse_spec(text: &str) -> Result<LinearSem, SemError> {
    let raw: RawSpec = serde_json::from_str(text).map_err(|e| SemError::ParseError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let nodes = raw
        .nodes
        .into_iter()
        .map(|n| NodeSpec {
            name: n.name,
            variance: n.variance,
            mean: n.mean,
            kind: n.kind,
            error_variance: n.error_variance,
            observed: n.observed,
        })
        .collect();
    let edges = raw
        .edges
        .into_iter()
        .map(|e| EdgeSpec::new(e.from, e.to, e.coef))
        .collect();
    LinearSem::new(nodes, edges, raw.error_distribution)?.solve_error_variances()
}

pub(super) fn to_spec_json(sem: &LinearSem) -> Value {
    let nodes: Vec<Value> = sem
        .nodes()
        .iter()
        .map(|n| {
            json!({
                "name": n.name,
                "variance": match n.variance { Variance::Target(v) => json!(v), Variance::Free => json!("free") },
                "mean": n.mean,
                "error_variance": match n.error_variance {
                    ErrorVariance::Fixed(v) => json!(v),
                    ErrorVariance::Auto => json!("auto"),
                },
                "kind": n.kind,
                "observed": n.observed,
            })
        })
        .collect();
    let edges: Vec<Value> = sem
        .edges()
        .iter()
        .map(|e| json!({"from": e.from, "to": e.to, "coef": e.coefficient}))
        .collect();
    json!({"nodes": nodes, "edges": edges, "error_distribution": sem.error_distribution()})
}
