//! Evaluation reports: a self-describing header, one JSON record per
//! measured unit, and aggregates recomputable from those records.
//!
//! The on-disk shape is JSON lines. Line one carries the header, line two
//! the aggregates, and every following line one record. Floats round-trip
//! exactly, so a reloaded report compares equal to the one written.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Identifies what produced a report and from which artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportHeader {
    /// Which evaluation ran, e.g. `length` or `diversity`.
    pub experiment: String,
    /// Content hash of the checkpoint evaluated.
    pub checkpoint_hash: String,
    /// Content hash of the registry supplying taught vectors; empty when the
    /// evaluation used none.
    pub registry_hash: String,
    /// Root seed all sampling streams were derived from.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ReportHeader,
}

#[derive(Serialize, Deserialize)]
struct AggregateLine {
    aggregates: Map<String, Value>,
}

/// A complete evaluation result ready for disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub header: ReportHeader,
    /// One entry per measured unit (prompt, instruction, example …).
    pub records: Vec<Value>,
    /// Named summary statistics; each must be recomputable from `records`.
    pub aggregates: Map<String, Value>,
}

impl EvalReport {
    pub fn new(header: ReportHeader) -> Self {
        EvalReport {
            header,
            records: Vec::new(),
            aggregates: Map::new(),
        }
    }

    /// Appends one record, serialized to a JSON value.
    pub fn push_record<T: Serialize>(&mut self, record: &T) -> Result<()> {
        self.records.push(serde_json::to_value(record)?);
        Ok(())
    }

    /// Sets one aggregate statistic.
    pub fn set_aggregate<T: Serialize>(&mut self, key: &str, value: T) -> Result<()> {
        self.aggregates
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Reads back a numeric aggregate.
    pub fn aggregate_f64(&self, key: &str) -> Option<f64> {
        self.aggregates.get(key).and_then(Value::as_f64)
    }

    /// Renders the report as JSON lines.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&HeaderLine {
            header: self.header.clone(),
        })?);
        out.push('\n');
        out.push_str(&serde_json::to_string(&AggregateLine {
            aggregates: self.aggregates.clone(),
        })?);
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses [`EvalReport::to_text`] output.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: HeaderLine = match lines.next() {
            Some(line) => serde_json::from_str(line)?,
            None => {
                return Err(Error::InvalidConfig(
                    "report is empty; expected a header line".to_string(),
                ))
            }
        };
        let aggregates: AggregateLine = match lines.next() {
            Some(line) => serde_json::from_str(line)?,
            None => {
                return Err(Error::InvalidConfig(
                    "report ends after the header; expected an aggregates line".to_string(),
                ))
            }
        };
        let mut records = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(EvalReport {
            header: header.header,
            records,
            aggregates: aggregates.aggregates,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EvalReport::from_text(&text)
    }
}

/// Renders a success curve as two whitespace-separated columns — the guess
/// budget `n` starting at 1, then the probability — one row per budget,
/// ready for external plotting tools.
pub fn curve_columns(curve: &[f64]) -> String {
    let mut out = String::new();
    for (i, p) in curve.iter().enumerate() {
        out.push_str(&format!("{} {p}\n", i + 1));
    }
    out
}

/// Parses [`curve_columns`] output back into probabilities, verifying the
/// budget column counts up from 1.
pub fn parse_curve_columns(text: &str) -> Result<Vec<f64>> {
    let mut curve = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split_whitespace();
        let (n, p) = match (cols.next(), cols.next(), cols.next()) {
            (Some(n), Some(p), None) => (n, p),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "curve line {} is not two columns: {line:?}",
                    i + 1
                )))
            }
        };
        let n: usize = n.parse().map_err(|_| {
            Error::InvalidConfig(format!("curve line {} has a bad budget: {n:?}", i + 1))
        })?;
        if n != i + 1 {
            return Err(Error::InvalidConfig(format!(
                "curve budgets must count up from 1; line {} says {n}",
                i + 1
            )));
        }
        curve.push(p.parse().map_err(|_| {
            Error::InvalidConfig(format!("curve line {} has a bad probability: {p:?}", i + 1))
        })?);
    }
    Ok(curve)
}
