//! Drawing datasets from a [`LinearSem`] with replicate-indexed seeding.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::sem::{ErrorDistribution, LinearSem, NodeKind};
use crate::stats::normal_quantile;

/// Suffix for the latent index column of a binary-threshold node.
pub const LATENT_SUFFIX: &str = "__latent";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulateError {
    #[error("error variances have not been solved")]
    UnresolvedErrorVariance,
    #[error("need at least 2 rows, got {0}")]
    NTooSmall(usize),
    #[error("{what} = {value} is out of range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("column `{name}` has {found} rows, expected {expected}")]
    RaggedColumns {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },
    #[error("csv: {0}")]
    Csv(String),
}

impl SimulateError {
    pub fn name(&self) -> &'static str {
        match self {
            SimulateError::UnresolvedErrorVariance => "UnresolvedErrorVariance",
            SimulateError::NTooSmall(_) => "NTooSmall",
            SimulateError::OutOfRange { .. } => "OutOfRange",
            SimulateError::DuplicateColumn(_) => "DuplicateColumn",
            SimulateError::RaggedColumns { .. } => "RaggedColumns",
            SimulateError::NonFinite { .. } => "NonFinite",
            SimulateError::Csv(_) => "CsvError",
        }
    }
}

/// Identifies one replicate's random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeedPolicy {
    pub base_seed: u64,
    pub replicate_index: u64,
}

impl SeedPolicy {
    pub fn new(base_seed: u64, replicate_index: u64) -> Self {
        SeedPolicy {
            base_seed,
            replicate_index,
        }
    }

    /// ChaCha keyed on the base seed, with the replicate index as stream id, so
    /// the stream of replicate `i` never depends on any other replicate.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.replicate_index);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub sem_hash: String,
    pub base_seed: u64,
    pub replicate_index: u64,
}

/// Column-oriented table of equal-length finite columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    observed: Vec<bool>,
    index: HashMap<String, usize>,
    n: usize,
    provenance: Option<Provenance>,
}

impl Dataset {
    /// All columns observed.
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self, SimulateError> {
        let observed = vec![true; names.len()];
        Self::with_observed(names, columns, observed)
    }

    pub fn with_observed(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        observed: Vec<bool>,
    ) -> Result<Self, SimulateError> {
        assert_eq!(names.len(), columns.len(), "one name per column");
        assert_eq!(names.len(), observed.len(), "one flag per column");
        let n = columns.first().map_or(0, Vec::len);
        let mut index = HashMap::new();
        for (j, (name, col)) in names.iter().zip(&columns).enumerate() {
            if index.insert(name.clone(), j).is_some() {
                return Err(SimulateError::DuplicateColumn(name.clone()));
            }
            if col.len() != n {
                return Err(SimulateError::RaggedColumns {
                    name: name.clone(),
                    expected: n,
                    found: col.len(),
                });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(SimulateError::NonFinite {
                    column: name.clone(),
                    row,
                });
            }
        }
        Ok(Dataset {
            names,
            columns,
            observed,
            index,
            n,
            provenance: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&j| self.columns[j].as_slice())
    }

    pub fn is_observed(&self, name: &str) -> Option<bool> {
        self.index.get(name).map(|&j| self.observed[j])
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn set_observed(&mut self, name: &str, observed: bool) -> bool {
        match self.index.get(name) {
            Some(&j) => {
                self.observed[j] = observed;
                true
            }
            None => false,
        }
    }

    /// Writes a header of column names and one row per observation, floats in
    /// shortest round-trip form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimulateError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.names).map_err(csv_err)?;
        let mut row = Vec::with_capacity(self.names.len());
        for i in 0..self.n {
            row.clear();
            row.extend(self.columns.iter().map(|c| format_float(c[i])));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| SimulateError::Csv(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads the format written by [`Dataset::write_csv`]. Every column is
    /// marked observed except latent index columns.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimulateError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        let names: Vec<String> = rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_string)
            .collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    SimulateError::Csv(format!(
                        "row {}: `{field}` in column `{}` is not a number",
                        i + 1,
                        names[j]
                    ))
                })?;
                columns[j].push(v);
            }
        }
        let observed = names.iter().map(|n| !n.ends_with(LATENT_SUFFIX)).collect();
        Self::with_observed(names, columns, observed)
    }
}

fn csv_err(e: csv::Error) -> SimulateError {
    SimulateError::Csv(e.to_string())
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Intercept `-Phi^-1(1 - p)` making `P(latent > 0) = p` for a unit-variance latent.
pub fn latent_threshold_intercept(p_a: f64) -> Result<f64, SimulateError> {
    if !(p_a > 0.0 && p_a < 1.0) {
        return Err(SimulateError::OutOfRange {
            what: "p_a",
            value: p_a,
        });
    }
    Ok(-normal_quantile(1.0 - p_a))
}

/// Draws `n` rows. Nodes are generated in topological order, each consuming
/// `n` error draws from the replicate's stream. A binary-threshold node's
/// children see the 0/1 value; its latent index is kept as `<node>__latent`.
pub fn draw_dataset(sem: &LinearSem, n: usize, seed: SeedPolicy) -> Result<Dataset, SimulateError> {
    let err = sem
        .error_variances()
        .ok_or(SimulateError::UnresolvedErrorVariance)?;
    if n < 2 {
        return Err(SimulateError::NTooSmall(n));
    }
    let nodes = sem.nodes();
    let mut rng = seed.rng();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
    let mut latents: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    let dist = sem.error_distribution();

    for &c in sem.order() {
        let sd = err[c].sqrt();
        let mut col = vec![nodes[c].mean; n];
        for (p, b) in sem.parents(c) {
            for (v, x) in col.iter_mut().zip(&values[p]) {
                *v += b * x;
            }
        }
        for v in col.iter_mut() {
            let e = match dist {
                ErrorDistribution::Normal => rng.sample::<f64, _>(StandardNormal),
                ErrorDistribution::UniformRescaled => {
                    (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt()
                }
            };
            *v += sd * e;
        }
        if nodes[c].kind == NodeKind::BinaryThreshold {
            let binary = col
                .iter()
                .map(|&l| if l > 0.0 { 1.0 } else { 0.0 })
                .collect();
            latents[c] = Some(col);
            values[c] = binary;
        } else {
            values[c] = col;
        }
    }

    let mut names: Vec<String> = nodes.iter().map(|n| n.name.clone()).collect();
    let mut observed: Vec<bool> = nodes.iter().map(|n| n.observed).collect();
    for (node, latent) in nodes.iter().zip(latents) {
        if let Some(l) = latent {
            names.push(format!("{}{LATENT_SUFFIX}", node.name));
            observed.push(false);
            values.push(l);
        }
    }
    let mut ds = Dataset::with_observed(names, values, observed)?;
    ds.provenance = Some(Provenance {
        sem_hash: sem.fingerprint(),
        base_seed: seed.base_seed,
        replicate_index: seed.replicate_index,
    });
    Ok(ds)
}
