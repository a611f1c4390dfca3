//! Parameter sweeps: a base config plus per-axis value lists, expanded into
//! the cartesian product and run in parallel.
//!
//! ```toml
//! [base]
//! seed = 1
//! [base.workload]
//! num_cns = 4
//!
//! [axes]
//! lock = ["cql", "caslock", "ticket"]
//! "workload.clients_per_cn" = [8, 16, 32]
//! ```

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;
use toml::{Table, Value};

use super::{run, BenchConfig, BenchError, CsvRow};
use crate::fabric::TraceSink;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("matrix: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("axis {axis}: {what}")]
    Axis { axis: String, what: String },
    #[error("point {index}: {source}")]
    Point {
        index: usize,
        #[source]
        source: BenchError,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Matrix {
    #[serde(default)]
    base: Table,
    #[serde(default)]
    axes: BTreeMap<String, Vec<Value>>,
}

fn axis_path(axis: &str) -> Vec<&str> {
    match axis {
        "lock" => vec!["lock", "kind"],
        "hierarchy" => vec!["lock", "hierarchy"],
        "fairness" => vec!["lock", "fairness"],
        other => other.split('.').collect(),
    }
}

fn set_path(t: &mut Table, path: &[&str], v: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty axis name")?;
    let mut cur = t;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("{p} is not a table"))?;
    }
    cur.insert(last.to_string(), v);
    Ok(())
}

/// Expands a matrix into concrete configs. The last axis (in name order)
/// varies fastest.
pub fn expand_matrix(text: &str) -> Result<Vec<BenchConfig>, MatrixError> {
    let m: Matrix = toml::from_str(text)?;
    let mut points = vec![m.base];
    for (axis, values) in &m.axes {
        if values.is_empty() {
            return Err(MatrixError::Axis {
                axis: axis.clone(),
                what: "no values".into(),
            });
        }
        let path = axis_path(axis);
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in values {
                let mut q = p.clone();
                set_path(&mut q, &path, v.clone()).map_err(|what| MatrixError::Axis {
                    axis: axis.clone(),
                    what,
                })?;
                next.push(q);
            }
        }
        points = next;
    }
    points
        .into_iter()
        .enumerate()
        .map(|(index, t)| BenchConfig::from_toml(&t.to_string()).map_err(|source| MatrixError::Point { index, source }))
        .collect()
}

/// Runs every point in parallel; results keep the input order.
pub fn run_matrix(points: &[BenchConfig]) -> Vec<Result<CsvRow, BenchError>> {
    points
        .par_iter()
        .map(|c| run(c, TraceSink::Off).map(|out| CsvRow::new(c, &out.metrics)))
        .collect()
}
